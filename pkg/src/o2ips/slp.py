"""Out-of-coverage sidelink positioning session as a discrete-event state machine.

Nodes exchange :class:`SlpMessage` records through an in-process queue with
per-link FIFO delivery and seeded latencies. Transitions are pure functions
of (state, message); all randomness (latencies, RTT noise) is drawn up front
from the session seed, so a topology and seed fully determine the trace.

Flow (first occurrence of each kind):

1. client broadcasts Solicitation
2. anchors that detect the target answer with DiscoveryResponse
3. client sends AnchorSelection (naming the reference anchor, which becomes the LMF)
4. client and LMF set up PC5 (Pc5Setup, acknowledged with Pc5Setup)
5. client sends LocationServiceRequest to the LMF
6. LMF authorizes and answers AuthResult
7. optionally, LMF announces AdditionalAnchors
8. SLPP: SlppCapability, SlppAssistanceData, SlppMeasurementRequest, SlppMeasurementResponse
9. LMF computes the fix once every expected response is in
10. LMF sends LocationReport to the client
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .channel import LosLabel, ToaMeasurement
from .errors import ProtocolViolation, SessionFailed
from .locate import PositionEstimate, SolverParams, levenberg_marquardt, lls
from .scene import SPEED_OF_LIGHT, AnchorSpec


class SlpRole(str, Enum):
    CLIENT_UE = "ClientUe"
    TARGET_UE = "TargetUe"
    ANCHOR_UE = "AnchorUe"
    REFERENCE_ANCHOR_LMF = "ReferenceAnchorLmf"


class MessageKind(str, Enum):
    SOLICITATION = "Solicitation"
    DISCOVERY_RESPONSE = "DiscoveryResponse"
    ANCHOR_SELECTION = "AnchorSelection"
    PC5_SETUP = "Pc5Setup"
    LOCATION_SERVICE_REQUEST = "LocationServiceRequest"
    AUTH_RESULT = "AuthResult"
    ADDITIONAL_ANCHORS = "AdditionalAnchors"
    SLPP_CAPABILITY = "SlppCapability"
    SLPP_ASSISTANCE_DATA = "SlppAssistanceData"
    SLPP_MEASUREMENT_REQUEST = "SlppMeasurementRequest"
    SLPP_MEASUREMENT_RESPONSE = "SlppMeasurementResponse"
    LOCATION_REPORT = "LocationReport"


K = MessageKind

CANONICAL_SEQUENCE = (
    K.SOLICITATION, K.DISCOVERY_RESPONSE, K.ANCHOR_SELECTION, K.PC5_SETUP,
    K.LOCATION_SERVICE_REQUEST, K.AUTH_RESULT, K.SLPP_CAPABILITY, K.SLPP_ASSISTANCE_DATA,
    K.SLPP_MEASUREMENT_REQUEST, K.SLPP_MEASUREMENT_RESPONSE, K.LOCATION_REPORT,
)

STEP_OF = {
    K.SOLICITATION: 1, K.DISCOVERY_RESPONSE: 2, K.ANCHOR_SELECTION: 3, K.PC5_SETUP: 4,
    K.LOCATION_SERVICE_REQUEST: 5, K.AUTH_RESULT: 6, K.ADDITIONAL_ANCHORS: 7,
    K.SLPP_CAPABILITY: 8, K.SLPP_ASSISTANCE_DATA: 8, K.SLPP_MEASUREMENT_REQUEST: 8,
    K.SLPP_MEASUREMENT_RESPONSE: 8, K.LOCATION_REPORT: 10,
}


def canonical_sequence(additional_anchors: bool = False) -> tuple[MessageKind, ...]:
    if not additional_anchors:
        return CANONICAL_SEQUENCE
    i = CANONICAL_SEQUENCE.index(K.AUTH_RESULT) + 1
    return CANONICAL_SEQUENCE[:i] + (K.ADDITIONAL_ANCHORS,) + CANONICAL_SEQUENCE[i:]


class Phase(IntEnum):
    DISCOVERY = 0
    SELECTION = 1
    SETUP = 2
    AUTHORIZED = 3
    MEASURING = 4
    COMPUTED = 5
    REPORTED = 6
    FAILED = 7  # terminal


@dataclass(frozen=True)
class SlpMessage:
    kind: MessageKind
    sender: str      # "Role:id"
    receiver: str    # "Role:id" or "*" for broadcast
    payload: Mapping = field(default_factory=dict)
    seq: int = -1

    def to_line(self) -> str:
        body = json.dumps(self.payload, sort_keys=True, separators=(",", ":"))
        return f"{self.seq}\t{self.kind.value}\t{self.sender}\t{self.receiver}\t{body}"


@dataclass(frozen=True)
class SessionState:
    """Per-node protocol state; ``advance`` never mutates it."""

    node_id: str
    role: SlpRole
    phase: Phase = Phase.DISCOVERY
    collected_measurements: tuple[ToaMeasurement, ...] = ()
    # static per-node knowledge
    detects_target: bool = True
    authorize: bool = True
    degraded_ok: bool = False
    additional_anchors: tuple[str, ...] = ()
    anchor_positions: Mapping[str, tuple] = field(default_factory=dict)
    ranges: Mapping[str, float] = field(default_factory=dict)    # target: pre-drawn RTT ranges
    range_sigma: float = 0.0
    target_id: str = "T"
    # dynamic
    responders: tuple[str, ...] = ()
    selected: tuple[str, ...] = ()
    reference: str | None = None
    expected_responses: int = 0

    @property
    def address(self) -> str:
        return f"{self.role.value}:{self.node_id}"


Outgoing = list[tuple[MessageKind, str, dict]]


def _addr(role: SlpRole, node_id: str) -> str:
    return f"{role.value}:{node_id}"


def _node_of(address: str) -> str:
    return address.split(":", 1)[1]


def _violation(state: SessionState, msg: SlpMessage):
    raise ProtocolViolation(
        f"{msg.kind.value} not valid for {state.role.value} {state.node_id} in {state.phase.name}")


def _goto(state: SessionState, phase: Phase, **kw) -> SessionState:
    if phase < state.phase:
        raise ProtocolViolation(f"{state.node_id}: {state.phase.name} -> {phase.name} goes backwards")
    return replace(state, phase=phase, **kw)


def advance(state: SessionState, incoming: SlpMessage) -> tuple[SessionState, Outgoing]:
    """Pure transition. Raises ProtocolViolation on a message the state does not accept."""
    kind, ph, role = incoming.kind, state.phase, state.role
    if ph is Phase.FAILED:
        _violation(state, incoming)

    if role is SlpRole.CLIENT_UE:
        if kind is K.DISCOVERY_RESPONSE and ph is Phase.DISCOVERY:
            return replace(state, responders=state.responders + (_node_of(incoming.sender),)), []
        if kind is K.PC5_SETUP and ph is Phase.SETUP and state.reference == _node_of(incoming.sender):
            lmf = _addr(SlpRole.REFERENCE_ANCHOR_LMF, state.reference)
            return state, [(K.LOCATION_SERVICE_REQUEST, lmf, {"client": state.node_id, "target": state.target_id})]
        if kind is K.AUTH_RESULT and ph is Phase.SETUP:
            if incoming.payload.get("granted"):
                return _goto(state, Phase.AUTHORIZED), []
            return _goto(state, Phase.FAILED), []
        if kind is K.ADDITIONAL_ANCHORS and ph is Phase.AUTHORIZED:
            return replace(state, selected=state.selected + tuple(incoming.payload["anchors"])), []
        if kind is K.LOCATION_REPORT and ph is Phase.AUTHORIZED:
            return _goto(state, Phase.REPORTED), []
        _violation(state, incoming)

    if role is SlpRole.TARGET_UE:
        if kind is K.SLPP_CAPABILITY and ph is Phase.DISCOVERY:
            caps = {"methods": ["rtt"], "max_anchors": 16}
            return _goto(state, Phase.AUTHORIZED), [(K.SLPP_CAPABILITY, incoming.sender, caps)]
        if kind is K.SLPP_ASSISTANCE_DATA and ph is Phase.AUTHORIZED:
            return _goto(state, Phase.MEASURING), []
        if kind is K.SLPP_MEASUREMENT_REQUEST and ph is Phase.MEASURING:
            out = []
            for aid in incoming.payload["anchors"]:
                if aid in state.ranges:
                    out.append((K.SLPP_MEASUREMENT_RESPONSE, incoming.sender,
                                {"anchor_id": aid, "range_m": state.ranges[aid],
                                 "sigma_m": state.range_sigma}))
            return _goto(state, Phase.COMPUTED), out
        _violation(state, incoming)

    # anchor UEs, including the one that becomes the LMF
    if kind is K.SOLICITATION and ph is Phase.DISCOVERY:
        if not state.detects_target:
            return state, []
        return _goto(state, Phase.SELECTION), [(K.DISCOVERY_RESPONSE, incoming.sender, {"anchor": state.node_id})]
    if kind is K.ANCHOR_SELECTION and ph is Phase.SELECTION:
        ref = incoming.payload["reference"]
        new_role = SlpRole.REFERENCE_ANCHOR_LMF if ref == state.node_id else SlpRole.ANCHOR_UE
        return _goto(state, Phase.SETUP, role=new_role, reference=ref,
                     selected=tuple(incoming.payload["anchors"])), []
    if role is SlpRole.REFERENCE_ANCHOR_LMF:
        if kind is K.PC5_SETUP and ph is Phase.SETUP:
            return state, [(K.PC5_SETUP, incoming.sender, {"ack": True})]
        if kind is K.LOCATION_SERVICE_REQUEST and ph is Phase.SETUP:
            if not state.authorize:
                return _goto(state, Phase.FAILED), [(K.AUTH_RESULT, incoming.sender, {"granted": False})]
            out: Outgoing = [(K.AUTH_RESULT, incoming.sender, {"granted": True})]
            selected = state.selected
            if state.additional_anchors:
                out.append((K.ADDITIONAL_ANCHORS, incoming.sender, {"anchors": list(state.additional_anchors)}))
                selected = selected + state.additional_anchors
            target = incoming.payload["target"]
            out.append((K.SLPP_CAPABILITY, _addr(SlpRole.TARGET_UE, target), {"request": True}))
            return _goto(state, Phase.AUTHORIZED, selected=selected, expected_responses=len(selected)), out
        if kind is K.SLPP_CAPABILITY and ph is Phase.AUTHORIZED:
            anchors = sorted(state.selected)
            assist = {"anchors": {a: list(state.anchor_positions[a]) for a in anchors}}
            return _goto(state, Phase.MEASURING), [
                (K.SLPP_ASSISTANCE_DATA, incoming.sender, assist),
                (K.SLPP_MEASUREMENT_REQUEST, incoming.sender, {"anchors": anchors}),
            ]
        if kind is K.SLPP_MEASUREMENT_RESPONSE and ph is Phase.MEASURING:
            p = incoming.payload
            m = ToaMeasurement(p["anchor_id"], p["range_m"], p["sigma_m"], los_label=LosLabel.LOS)
            got = state.collected_measurements + (m,)
            if len(got) >= state.expected_responses:
                if len(got) < 4 and not state.degraded_ok:
                    return _goto(state, Phase.FAILED, collected_measurements=got), []
                return _goto(state, Phase.COMPUTED, collected_measurements=got), []
            return replace(state, collected_measurements=got), []
    _violation(state, incoming)


def rtt_range(clock_offset_a: float, clock_offset_b: float, true_distance: float,
              processing_delay: float, noise_sigma_m: float = 0.0,
              rng: np.random.Generator | None = None) -> float:
    """Two-way ranging between unsynchronized clocks.

    Each side timestamps on its own clock, so t_round on the initiator clock
    and the responder's turnaround both cancel their offsets. Timestamps are
    kept as exact rationals, making the cancellation bit-exact.
    """
    if processing_delay < 0:
        raise ValueError("processing_delay must be >= 0")
    c = Fraction(SPEED_OF_LIGHT)
    tof = Fraction(true_distance) / c
    oa, ob, proc = Fraction(clock_offset_a), Fraction(clock_offset_b), Fraction(processing_delay)
    t0 = Fraction(0)
    a_send = t0 + oa
    b_recv = t0 + tof + ob
    b_send = b_recv + proc
    a_recv = (b_send - ob) + tof + oa
    t_round = a_recv - a_send
    turnaround = b_send - b_recv
    r = float(c * (t_round - turnaround) / 2)
    if noise_sigma_m > 0 and rng is not None:
        r += float(rng.normal(0.0, noise_sigma_m))
    return r


@dataclass(frozen=True)
class SlpTopology:
    target_position: tuple[float, float, float]
    anchors: Sequence[AnchorSpec]
    target_clock_offset: float = 0.0
    client_id: str = "C"
    target_id: str = "T"
    reference_id: str | None = None          # default: first responder by id
    additional_anchors: Sequence[AnchorSpec] = ()
    authorize: bool = True
    degraded_ok: bool = False
    floor_height: float = 3.0
    processing_delay: float = 1e-4
    noise_sigma_m: float = 0.0
    latency_s: tuple[float, float] = (1e-4, 1e-3)
    discovery_window_s: float = 1e-2


ChannelHook = Callable[[AnchorSpec, np.ndarray], "float | None"]


def los_channel(anchor: AnchorSpec, target: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(anchor.position) - target))


def _degraded_fix(meas: Sequence[ToaMeasurement], positions: Mapping[str, np.ndarray],
                  z: float) -> PositionEstimate:
    """Horizontal fix with z pinned; ranges are projected onto the z plane."""
    a = np.array([positions[m.anchor_id] for m in meas], dtype=float)
    r = np.array([m.range for m in meas], dtype=float)
    rh = np.sqrt(np.maximum(r**2 - (a[:, 2] - z) ** 2, 0.0))

    def model(x):
        d = x[None, :] - a[:, :2]
        n = np.linalg.norm(d, axis=1)
        return n, d / np.where(n > 0, n, 1.0)[:, None]

    x0 = a[:, :2].mean(axis=0) + 1e-3
    res = levenberg_marquardt(model, rh, np.ones_like(rh), x0, SolverParams())
    return PositionEstimate(np.array([res.x[0], res.x[1], z]), "slp-degraded-2d",
                            res.iterations, res.cost, res.converged, aux={"degraded": True})


@dataclass
class SessionResult:
    trace: list[SlpMessage]
    report: PositionEstimate | None
    violations: list[str]
    states: dict[str, SessionState]


def run_session(topology: SlpTopology, channel: ChannelHook = los_channel,
                locate: Callable = lls, seed: int = 0,
                return_details: bool = False):
    """Run one session; returns (trace, report).

    Raises:
        SessionFailed: authorization denied, no anchor detects the target, or
            too few anchors without ``degraded_ok``. The partial trace is on
            the exception's ``trace`` attribute.
    """
    rng = np.random.default_rng(seed)
    target = np.asarray(topology.target_position, dtype=float)
    all_anchors = {a.id: a for a in [*topology.anchors, *topology.additional_anchors]}
    dist = {aid: channel(a, target) for aid, a in sorted(all_anchors.items())}
    ranges = {}
    for aid in sorted(dist):
        if dist[aid] is not None:
            ranges[aid] = rtt_range(topology.target_clock_offset, all_anchors[aid].clock_offset,
                                    dist[aid], topology.processing_delay, topology.noise_sigma_m, rng)
    positions = {aid: tuple(float(c) for c in a.position) for aid, a in all_anchors.items()}

    client = SessionState(topology.client_id, SlpRole.CLIENT_UE, degraded_ok=topology.degraded_ok,
                          target_id=topology.target_id)
    states: dict[str, SessionState] = {
        client.address: client,
        _addr(SlpRole.TARGET_UE, topology.target_id): SessionState(
            topology.target_id, SlpRole.TARGET_UE, ranges=ranges, range_sigma=topology.noise_sigma_m),
    }
    for a in sorted(topology.anchors, key=lambda a: a.id):
        st = SessionState(a.id, SlpRole.ANCHOR_UE, detects_target=dist[a.id] is not None,
                          authorize=topology.authorize, degraded_ok=topology.degraded_ok,
                          additional_anchors=tuple(sorted(x.id for x in topology.additional_anchors)),
                          anchor_positions=positions)
        states[st.address] = st

    trace: list[SlpMessage] = []
    violations: list[str] = []
    queue: list = []
    link_clock: dict[tuple[str, str], float] = {}
    counter = [0]

    def address_of(node_id_or_addr: str) -> str:
        # messages are addressed by role; anchors change role at selection time
        nid = _node_of(node_id_or_addr)
        for addr, st in states.items():
            if st.node_id == nid:
                return addr
        raise KeyError(node_id_or_addr)

    def send(now: float, kind: MessageKind, sender: str, receiver: str, payload: dict):
        msg = SlpMessage(kind, sender, receiver, payload, seq=len(trace))
        trace.append(msg)
        receivers = ([a for a, s in states.items() if s.role is SlpRole.ANCHOR_UE]
                     if receiver == "*" else [address_of(receiver)])
        for r in receivers:
            lo, hi = topology.latency_s
            t = max(now + float(rng.uniform(lo, hi)), link_clock.get((sender, r), 0.0))
            link_clock[(sender, r)] = t
            counter[0] += 1
            heapq.heappush(queue, (t, counter[0], _node_of(r), msg))

    def fail(reason: str):
        exc = SessionFailed(reason)
        exc.trace = trace
        raise exc

    send(0.0, K.SOLICITATION, client.address, "*", {"target": topology.target_id})
    counter[0] += 1
    heapq.heappush(queue, (topology.discovery_window_s, counter[0], "timer", None))
    report = None
    while queue:
        now, _, dest, msg = heapq.heappop(queue)
        if msg is None:
            # discovery window closes: client selects anchors
            c = states[client.address]
            resp = tuple(sorted(c.responders))
            if not resp:
                fail("no anchor detected the target")
            n_total = len(resp) + len(topology.additional_anchors)
            if n_total < 4 and not topology.degraded_ok:
                fail(f"only {n_total} anchors available, need 4")
            ref = topology.reference_id if topology.reference_id in resp else resp[0]
            states[client.address] = replace(c, phase=Phase.SETUP, selected=resp, reference=ref)
            for aid in resp:
                send(now, K.ANCHOR_SELECTION, client.address, _addr(SlpRole.ANCHOR_UE, aid),
                     {"anchors": list(resp), "reference": ref})
            send(now, K.PC5_SETUP, client.address, _addr(SlpRole.ANCHOR_UE, ref), {"client": client.node_id})
            continue
        dest = address_of("x:" + dest)
        st = states[dest]
        try:
            new, out = advance(st, msg)
        except ProtocolViolation as exc:
            violations.append(f"{msg.seq}: {exc}")
            continue
        if new.address != dest:   # anchor promoted to LMF
            del states[dest]
        states[new.address] = new
        for kind, to, payload in out:
            send(now, kind, new.address, to, payload)
        if new.role is SlpRole.REFERENCE_ANCHOR_LMF and new.phase is Phase.COMPUTED and report is None:
            meas = sorted(new.collected_measurements, key=lambda m: m.anchor_id)
            apos = {aid: np.array(positions[aid]) for aid in positions}
            if len(meas) >= 4:
                report = locate(meas, apos)
            else:
                report = _degraded_fix(meas, apos, topology.floor_height / 2)
            payload = {"position": [round(float(v), 12) for v in report.position],
                       "method": report.method_tag,
                       "degraded": len(meas) < 4}
            send(now, K.LOCATION_REPORT, new.address, client.address, payload)
            states[new.address] = _goto(new, Phase.REPORTED)
    c = states[client.address]
    if c.phase is Phase.FAILED:
        fail("authorization denied")
    if report is None or c.phase is not Phase.REPORTED:
        fail("session ended without a location report")
    if return_details:
        return SessionResult(trace, report, violations, states)
    return trace, report


def first_occurrences(trace: Sequence[SlpMessage]) -> list[MessageKind]:
    seen, out = set(), []
    for m in trace:
        if m.kind not in seen:
            seen.add(m.kind)
            out.append(m.kind)
    return out


def conforms(trace: Sequence[SlpMessage]) -> bool:
    kinds = first_occurrences(trace)
    return tuple(kinds) == canonical_sequence(K.ADDITIONAL_ANCHORS in kinds)


def dumps_trace(trace: Sequence[SlpMessage]) -> str:
    head = "seq\tkind\tfrom\tto\tpayload"
    return "\n".join([head, *(m.to_line() for m in trace)]) + "\n"


def demo_topology(num_anchors: int = 4, seed: int = 0, **overrides) -> SlpTopology:
    """Random anchors on a 10 m ring around a target, with random clock offsets."""
    rng = np.random.default_rng(seed)
    target = rng.uniform([5, 5, 1], [15, 25, 11])
    anchors = []
    for i in range(num_anchors):
        ang = 2 * np.pi * (i + rng.uniform(0, 0.5)) / max(num_anchors, 1)
        pos = target + np.array([10 * np.cos(ang), 10 * np.sin(ang), rng.uniform(-5, 5)])
        anchors.append(AnchorSpec(f"A{i}", pos, 0.0, float(rng.uniform(-1e-2, 1e-2))))
    kw = dict(target_position=tuple(float(v) for v in target), anchors=anchors,
              target_clock_offset=float(rng.uniform(-1e-2, 1e-2)))
    kw.update(overrides)
    return SlpTopology(**kw)
