import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from o2ips.channel import (CirTap, DiffuseParams, LosLabel, LossParams, ToaMeasurement, calibrate_threshold,
                           classify_los_nlos, extract_fap, fap_tap, fspl_db, link_rng, oracle_los_label,
                           path_gain, synthesize_cir)
from o2ips.errors import InsufficientData, NoDetectablePath, ParseError
from o2ips.raypath import Mechanism, MechanismKind, Mpc, enumerate_mpcs
from o2ips.scene import SPEED_OF_LIGHT, Band, FrequencyBand

NO_DIFFUSE = LossParams(diffuse=DiffuseParams(mean_count=0.0))


def mpc(mech, length, crossings=0):
    return Mpc(mech, np.array([[0.0, 0, 0], [length, 0, 0]]), float(length), "A0", crossings)


def tap(delay_ns, power, mech=None):
    return CirTap(delay_ns * 1e-9, power, mech or Mechanism.los(), "A0")


def test_c_constant():
    assert SPEED_OF_LIGHT == 299_792_458.0


def test_fspl_friis_value():
    # independent Friis: (4 pi d / lambda)^2 in dB
    lam = 299_792_458.0 / 1e9
    ref = 10 * math.log10((4 * math.pi * 1.0 / lam) ** 2)
    assert fspl_db(1.0, 1e9) == pytest.approx(ref, abs=1e-12)
    g = path_gain(mpc(Mechanism.los(), 1.0), FrequencyBand(Band.FR1, 1e9), LossParams())
    assert g == pytest.approx(-32.45, abs=0.01)


def test_wall_loss_band_difference():
    m = mpc(Mechanism.transmission(1), 10.0, crossings=1)
    fr1 = path_gain(m, FrequencyBand(Band.FR1, 3e9), LossParams())
    fr2 = path_gain(m, FrequencyBand(Band.FR2, 3e9), LossParams())
    assert fr1 - fr2 == 20.0


def test_los_has_no_mechanism_terms():
    fb = FrequencyBand(Band.FR2, 28e9)
    assert path_gain(mpc(Mechanism.los(), 7.0), fb, LossParams()) == -fspl_db(7.0, 28e9)


def test_reflection_and_diffraction_losses():
    fb = FrequencyBand(Band.FR3, 10e9)
    lp = LossParams()
    base = -fspl_db(12.0, 10e9)
    assert path_gain(mpc(Mechanism.reflection(["a", "b"]), 12.0), fb, lp) == pytest.approx(base - 14.0)
    assert path_gain(mpc(Mechanism.diffraction("e"), 12.0, crossings=1), fb, lp) == pytest.approx(base - 30.0)


def test_loss_param_validation():
    with pytest.raises(ParseError):
        LossParams(reflection_loss_db=-1)
    with pytest.raises(ParseError):
        LossParams(fap_threshold_db=0)
    with pytest.raises(ParseError):
        LossParams(toa_sigma_m=-0.1)
    with pytest.raises(ParseError):
        LossParams.from_dict({"bogus": 1})
    lp = LossParams.from_dict({"wall_loss_db": {"FR2": 30}, "toa_sigma_m": 0.2})
    assert lp.wall_loss_db[Band.FR2] == 30 and lp.wall_loss_db[Band.FR1] == 5
    assert LossParams.from_dict(lp.to_dict()) == lp


def test_defaults():
    lp = LossParams()
    assert lp.wall_loss_db == {Band.FR1: 5.0, Band.FR2: 25.0, Band.FR3: 15.0}
    assert (lp.reflection_loss_db, lp.diffraction_loss_db, lp.noise_floor_db, lp.fap_threshold_db,
            lp.toa_sigma_m) == (7.0, 15.0, -100.0, 20.0, 0.1)


# ---------------------------------------------------------------- CIR synthesis
def three_mpcs():
    return [mpc(Mechanism.los(), 5.0), mpc(Mechanism.reflection(["p"]), 9.0),
            mpc(Mechanism.diffraction("e"), 7.0)]


def test_cir_without_diffuse():
    fb = FrequencyBand(Band.FR3, 10e9)
    taps = synthesize_cir(three_mpcs(), fb, NO_DIFFUSE, np.random.default_rng(0))
    assert len(taps) == 3
    assert [t.delay for t in taps] == [5.0 / SPEED_OF_LIGHT, 7.0 / SPEED_OF_LIGHT, 9.0 / SPEED_OF_LIGHT]


def test_cir_deterministic_and_diffuse_trails():
    fb = FrequencyBand(Band.FR3, 10e9)
    lp = LossParams(diffuse=DiffuseParams(mean_count=30.0))
    a = synthesize_cir(three_mpcs(), fb, lp, np.random.default_rng(5))
    b = synthesize_cir(three_mpcs(), fb, lp, np.random.default_rng(5))
    assert a == b
    first = min(t.delay for t in a if t.mechanism.kind is not MechanismKind.DIFFUSE)
    first_power = [t.power for t in a if t.delay == first][0]
    diffuse = [t for t in a if t.mechanism.kind is MechanismKind.DIFFUSE]
    assert diffuse
    for t in diffuse:
        assert t.delay > first
        assert first_power - lp.diffuse.loss_spread_db <= t.power <= first_power - 5.0
    assert [t.delay for t in a] == sorted(t.delay for t in a)


def test_cir_delay_lower_bound(scene):
    rng = np.random.default_rng(1)
    b = scene.building
    for n in rng.uniform(b.box_min + 0.3, b.box_max - 0.3, size=(30, 3)):
        for anc in scene.anchors:
            d = np.linalg.norm(np.asarray(anc.position) - n)
            for t in synthesize_cir(enumerate_mpcs(anc, n, scene), scene.band, LossParams(), rng):
                assert t.delay >= d / SPEED_OF_LIGHT - 1e-12


# ---------------------------------------------------------------- FAP
def test_fap_first_tap_qualifies():
    lp = LossParams(toa_sigma_m=0.0)
    m = extract_fap([tap(10, -60), tap(15, -50)], lp)
    assert m.range == pytest.approx(2.998, abs=1e-3)
    assert m.range == SPEED_OF_LIGHT * (10 * 1e-9)


def test_fap_skips_weak_first_tap():
    lp = LossParams(toa_sigma_m=0.0)
    m = extract_fap([tap(10, -95), tap(15, -60, Mechanism.diffraction("e"))], lp)
    assert m.range == SPEED_OF_LIGHT * (15 * 1e-9)
    assert m.true_mechanism == Mechanism.diffraction("e") and m.edge_id == "e"


def test_fap_nothing_detectable():
    with pytest.raises(NoDetectablePath):
        extract_fap([tap(10, -95), tap(12, -81)], LossParams())
    with pytest.raises(ValueError):
        extract_fap([], LossParams())


def test_fap_noise_and_sigma():
    lp = LossParams(toa_sigma_m=0.5)
    ranges = [extract_fap([tap(100, -60)], lp, np.random.default_rng(i)).range for i in range(2000)]
    assert np.mean(ranges) == pytest.approx(SPEED_OF_LIGHT * 100e-9, abs=0.05)
    assert np.std(ranges) == pytest.approx(0.5, rel=0.08)
    assert extract_fap([tap(100, -60)], lp).sigma == 0.5


@given(st.lists(st.tuples(st.floats(1, 500), st.floats(-130, -30)), min_size=1, max_size=20))
def test_fap_minimality(raw):
    lp = LossParams()
    taps = [tap(d, p) for d, p in raw]
    above = [t for t in taps if t.power >= lp.detection_level_db]
    if not above:
        with pytest.raises(NoDetectablePath):
            fap_tap(taps, lp)
        return
    f = fap_tap(taps, lp)
    assert all(f.delay <= t.delay for t in above)


def test_measurement_invariants():
    with pytest.raises(ValueError):
        ToaMeasurement("A", 0.0, 0.1)
    with pytest.raises(ValueError):
        ToaMeasurement("A", 1.0, -0.1)


# ---------------------------------------------------------------- LoS / NLoS test
def test_classify_examples():
    assert classify_los_nlos(-60, -70) is LosLabel.LOS
    assert classify_los_nlos(-80, -70) is LosLabel.NLOS
    assert classify_los_nlos(-70, -70) is LosLabel.LOS


def test_calibrate_examples():
    data = [(-58, "LoS"), (-62, "LoS"), (-79, "NLoS"), (-81, "NLoS")]
    assert calibrate_threshold(data) == -70.0
    assert calibrate_threshold([(-50, LosLabel.LOS), (-90, LosLabel.NLOS)]) == -70.0
    with pytest.raises(InsufficientData):
        calibrate_threshold([(-50, "LoS")])
    assert calibrate_threshold(data) == calibrate_threshold(list(data))


def test_classifier_accuracy_monte_carlo():
    rng = np.random.default_rng(2024)
    n = 5000
    los = rng.normal(-60.0, 3.0, n)
    nlos = rng.normal(-75.0, 3.0, n)
    train = [(p, "LoS") for p in los[:500]] + [(p, "NLoS") for p in nlos[:500]]
    thr = calibrate_threshold(train)
    correct = sum(classify_los_nlos(p, thr) is LosLabel.LOS for p in los[500:])
    correct += sum(classify_los_nlos(p, thr) is LosLabel.NLOS for p in nlos[500:])
    assert correct / (2 * (n - 500)) >= 0.95


def test_oracle_labels():
    assert oracle_los_label(Mechanism.los()) is LosLabel.LOS
    assert oracle_los_label(Mechanism.transmission(2)) is LosLabel.LOS
    assert oracle_los_label(Mechanism.reflection(["p"])) is LosLabel.NLOS
    assert oracle_los_label(Mechanism.diffraction("e")) is LosLabel.NLOS


def test_link_rng_independent_of_order():
    a = link_rng(7, 3, "A1", 0).normal(size=4)
    link_rng(7, 2, "A0", 0).normal(size=100)
    assert np.array_equal(a, link_rng(7, 3, "A1", 0).normal(size=4))
    assert not np.array_equal(a, link_rng(7, 3, "A2", 0).normal(size=4))
    assert not np.array_equal(a, link_rng(7, 3, "A1", 1).normal(size=4))
