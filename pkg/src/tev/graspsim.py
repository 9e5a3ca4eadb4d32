"""Kinematic gripper simulator plus the reactive controllers that close the
loop from displacement fields back to gripper commands.

The world is a one-dimensional parallel gripper squeezing a rigid object.
Grip force grows linearly with squeeze depth; the object slides once the
tangential load beats Coulomb friction, and drops when the cumulative slide
exceeds the finger length.  Every step emits a sensor frame built from the
same envelope/drift primitives the synthetic corpus uses, so a network
trained on that corpus sees in-distribution inputs here.

Controllers are causally isolated: they receive displacement frames (and
network outputs derived from them) and emit opening deltas.  Simulator
ground truth never crosses that interface; trial outcomes are judged from
the simulator side alone.
"""

from __future__ import annotations

import csv
import inspect
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import dataset as ds
from . import eventnet as ev
from . import field as fd
from . import numerics as nx
from . import pixelmotion as pm
from .dataset import EventClass
from .errors import ConfigurationError, FormatError


@dataclass(frozen=True)
class SimParams:
    """Physical constants and controller gains; one set per experiment."""

    k_spring_n_mm: float = 4.0  # grip force per mm of squeeze
    k_slide_mm_n: float = 0.35  # slide rate per newton of friction deficit
    crush_mm: float = 4.0  # squeeze beyond this crushes the object
    finger_len_mm: float = 12.0  # cumulative slide budget before the drop
    speed_mm: float = 0.5  # max opening change per control step
    approach_mm: float = 15.0  # starting clearance above the object width
    squeeze_margin_mm: float = 0.7  # open-loop: close this far past target
    slip_tol_mm: float = 0.5  # a lift that slid further than this failed
    detect_squeeze_mm: float = 2.0  # closed-loop: squeeze after the event fires
    tighten_mm: float = 0.2  # regrasp step while slip is indicated
    max_tighten_mm: float = 2.5  # total regrasp travel budget per trial
    slip_tau: float = 0.5  # slip probability that triggers tightening
    hold_steps: int = 60  # lift must survive this long to count
    load_interval_steps: int = 45
    noise_mm: float = ds.DEFAULT_NOISE_MM
    fs: float = fd.DEFAULT_FS

    def __post_init__(self):
        if min(self.k_spring_n_mm, self.k_slide_mm_n, self.crush_mm,
               self.finger_len_mm, self.speed_mm, self.max_tighten_mm) <= 0:
            raise ConfigurationError("physical constants must be positive")
        if not 0 < self.slip_tau < 1:
            raise ConfigurationError(f"slip_tau must be in (0,1), got {self.slip_tau}")
        if self.hold_steps < 1 or self.load_interval_steps < 1:
            raise ConfigurationError("step counts must be >= 1")


# Shear left in the gel by sliding relaxes by this factor per stuck step.
DRIFT_RELAX = 0.5

# Width (mm), weight (N), friction coefficient.  Ten generic objects whose
# friction roughly tracks weight so a 2 mm squeeze always holds them.
OBJECT_PRESETS = [
    ("obj01", 18.0, 1.0, 0.50),
    ("obj02", 25.0, 2.0, 0.60),
    ("obj03", 32.0, 3.0, 0.70),
    ("obj04", 40.0, 4.0, 0.80),
    ("obj05", 15.0, 1.5, 0.45),
    ("obj06", 22.0, 2.5, 0.55),
    ("obj07", 28.0, 1.2, 0.65),
    ("obj08", 35.0, 3.5, 0.75),
    ("obj09", 20.0, 0.8, 0.50),
    ("obj10", 30.0, 2.2, 0.60),
]


@dataclass
class GraspScenario:
    """One object plus the measurement error the open-loop mode relies on."""

    object_width_mm: float
    object_weight_n: float
    friction: float
    seed: int = 0
    sigma_n_mm: float = 1.0
    load_schedule_n: tuple = ()
    contact_radius_mm: float = 3.5
    name: str = "object"

    def __post_init__(self):
        if self.object_width_mm <= 0 or self.object_weight_n <= 0:
            raise ConfigurationError("object width and weight must be positive")
        if not 0 < self.friction <= 2:
            raise ConfigurationError(f"friction {self.friction} out of range")
        if self.sigma_n_mm < 0:
            raise ConfigurationError("sigma_n must be >= 0")
        self.load_schedule_n = tuple(float(w) for w in self.load_schedule_n)
        if any(w <= 0 for w in self.load_schedule_n):
            raise ConfigurationError("scheduled loads must be positive")

    @property
    def measured_opening_mm(self) -> float:
        """Target opening as the (noisy) width measurement reports it."""
        noise = float(nx.rng_from(self.seed, "measure").normal(0.0, self.sigma_n_mm))
        return max(0.0, self.object_width_mm + noise)


def scenario_from_preset(index: int, seed: int, **overrides) -> GraspScenario:
    name, width, weight, mu = OBJECT_PRESETS[index % len(OBJECT_PRESETS)]
    radius = float(np.clip(width / 8.0, 2.5, 4.5))
    kw = dict(object_width_mm=width, object_weight_n=weight, friction=mu,
              seed=seed, contact_radius_mm=radius, name=name)
    kw.update(overrides)
    return GraspScenario(**kw)


@dataclass
class GripperState:
    opening_mm: float
    speed_mm: float
    force_n: float = 0.0
    mode: str = "open_loop"

    def __post_init__(self):
        if self.opening_mm < 0:
            raise ConfigurationError("opening must be >= 0")
        if self.mode not in ("open_loop", "closed_loop"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


class GraspWorld:
    """Simulator state; controllers never see this object."""

    def __init__(self, scenario: GraspScenario, params: SimParams, mode: str = "open_loop"):
        self.scenario = scenario
        self.params = params
        self.gripper = GripperState(
            opening_mm=scenario.object_width_mm + params.approach_mm,
            speed_mm=params.speed_mm,
            mode=mode,
        )
        self.t = 0
        self.cum_slide_mm = 0.0  # monotone; drives the drop rule
        self.drift_mm = 0.0  # shear seen by the sensor; relaxes when stuck
        self.extra_load_n = 0.0
        self.lifted = False
        self.status = "ok"  # ok | dropped | crushed
        self.first_contact_step: Optional[int] = None
        self.slip_steps: list[int] = []
        self._rng = nx.rng_from(scenario.seed, "sensor")
        self._env = ds.patch_envelope((0.0, 0.0), scenario.contact_radius_mm)
        self._press_dir = np.array([0.0, -1.0], dtype=np.float32)
        self._slip_dir = np.array([1.0, 0.0], dtype=np.float32)

    @property
    def squeeze_mm(self) -> float:
        return max(0.0, self.scenario.object_width_mm - self.gripper.opening_mm)

    @property
    def grip_force_n(self) -> float:
        return self.params.k_spring_n_mm * self.squeeze_mm

    @property
    def tangential_load_n(self) -> float:
        return (self.scenario.object_weight_n + self.extra_load_n) if self.lifted else 0.0

    @property
    def in_contact(self) -> bool:
        return self.squeeze_mm > 0.0

    def add_weight(self, newtons: float) -> None:
        self.extra_load_n += float(newtons)

    def lift(self) -> None:
        self.lifted = True


def step_sim(world: GraspWorld, delta_mm: float):
    """Advance one control tick and return (world, DisplacementFrame).

    The opening change is clipped to the gripper's per-step speed.  Slide
    rate is k_slide times the friction deficit; a lifted object with no grip
    at all spends the whole finger length at once.
    """
    p = world.params
    delta = float(np.clip(delta_mm, -p.speed_mm, p.speed_mm))
    g = world.gripper
    g.opening_mm = max(0.0, g.opening_mm + delta)

    if world.in_contact and world.first_contact_step is None:
        world.first_contact_step = world.t
    if world.squeeze_mm > p.crush_mm and world.status == "ok":
        world.status = "crushed"
    g.force_n = world.grip_force_n

    load = world.tangential_load_n
    grip = world.scenario.friction * g.force_n
    sliding = False
    if world.lifted and world.status == "ok":
        if g.force_n <= 0.0:
            world.cum_slide_mm = p.finger_len_mm + 1.0
        elif load > grip:
            rate = p.k_slide_mm_n * (load - grip)
            world.cum_slide_mm += rate
            world.drift_mm += rate
            world.slip_steps.append(world.t)
            sliding = True
        if world.cum_slide_mm > p.finger_len_mm:
            world.status = "dropped"
    if not sliding:
        world.drift_mm *= DRIFT_RELAX

    amp = ds.FORCE_TO_AMP * g.force_n
    frame = world._env[None] * (amp * world._press_dir)[:, None, None]
    frame = frame + (world.drift_mm * world._slip_dir)[:, None, None]
    if world.status == "dropped" or (world.lifted and g.force_n <= 0.0):
        frame = np.zeros_like(frame)
    frame = ds.cap_field(frame.astype(np.float32))
    if p.noise_mm > 0:
        frame = frame + world._rng.normal(0.0, p.noise_mm, frame.shape).astype(np.float32)
    world.t += 1
    return world, fd.DisplacementFrame(frame)


# ---------------------------------------------------------------------------
# Event sources: frames in, network output out
# ---------------------------------------------------------------------------


class StreamClassifier:
    """Push-driven twin of classify_stream: newest-anchored strided window."""

    def __init__(self, params: dict, config: ev.ClassifierConfig, stride: int = fd.DEFAULT_STRIDE):
        self.params = params
        self.config = config
        self.stride = stride
        self.need = (config.input_len - 1) * stride + 1
        self.buf: list[np.ndarray] = []
        uniform = np.full(config.n_classes, 1.0 / config.n_classes, dtype=np.float32)
        self._stale = ev.ClassifierOutput(
            probabilities=uniform,
            label=EventClass(0),
            logits=np.zeros(config.n_classes, dtype=np.float32),
            stale=True,
        )

    def push(self, frame) -> ev.ClassifierOutput:
        self.buf.append(np.asarray(frame, dtype=np.float32))
        if len(self.buf) > self.need:
            del self.buf[: len(self.buf) - self.need]
        if len(self.buf) < self.need:
            return self._stale
        window = np.stack(self.buf[::-1][:: self.stride][::-1])
        return ev.classify(self.params, self.config, window)


class CascadeEventSource:
    """Classify a few frames into the future: predictor rollout then classify."""

    def __init__(
        self,
        predictor: tuple[dict, pm.PredictorConfig],
        classifier: tuple[dict, ev.ClassifierConfig],
        n_p: Optional[int] = None,
        stride: int = fd.DEFAULT_STRIDE,
    ):
        self.predictor = predictor
        self.classifier = classifier
        self.n_p = predictor[1].n_p if n_p is None else n_p
        self.stride = stride
        window = max(predictor[1].n_in, classifier[1].input_len)
        self.need = (window - 1) * stride + 1
        self.buf: list[np.ndarray] = []
        n_cls = classifier[1].n_classes
        uniform = np.full(n_cls, 1.0 / n_cls, dtype=np.float32)
        self._stale = ev.ClassifierOutput(
            probabilities=uniform,
            label=EventClass(0),
            logits=np.zeros(n_cls, dtype=np.float32),
            stale=True,
        )

    def push(self, frame) -> ev.ClassifierOutput:
        self.buf.append(np.asarray(frame, dtype=np.float32))
        if len(self.buf) > self.need:
            del self.buf[: len(self.buf) - self.need]
        if len(self.buf) < self.need:
            return self._stale
        window = np.stack(self.buf[::-1][:: self.stride][::-1])
        p_params, p_config = self.predictor
        c_params, c_config = self.classifier
        return pm.predict_event(window, (p_params, p_config), (c_params, c_config), self.n_p)


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------


class OpenLoopController:
    """Close to a fixed target opening, then hold.  Never looks at frames."""

    def __init__(self, target_mm: float, speed_mm: float):
        self.target_mm = float(target_mm)
        self.speed_mm = float(speed_mm)
        self.opening_mm: Optional[float] = None
        self.done = False

    def start(self, opening_mm: float) -> None:
        self.opening_mm = float(opening_mm)

    def update(self, frame) -> float:
        gap = self.target_mm - self.opening_mm
        if abs(gap) < 1e-9:
            self.done = True
            return 0.0
        delta = float(np.clip(gap, -self.speed_mm, self.speed_mm))
        self.opening_mm += delta
        self.done = abs(self.target_mm - self.opening_mm) < 1e-9
        return delta


class ContactDetectController:
    """Close until the event source reports making contact, then squeeze a
    fixed extra depth.  Sees only frames and network outputs."""

    def __init__(self, events, speed_mm: float, detect_squeeze_mm: float):
        self.events = events
        self.speed_mm = float(speed_mm)
        self.remaining_squeeze = float(detect_squeeze_mm)
        self.fired_step: Optional[int] = None
        self.done = False
        self._step = 0
        self.last_output: Optional[ev.ClassifierOutput] = None

    def update(self, frame) -> float:
        out = self.events.push(frame)
        self.last_output = out
        self._step += 1
        if self.fired_step is None:
            if not out.stale and out.label == EventClass.MAKING_CONTACT:
                self.fired_step = self._step - 1
            return -self.speed_mm
        if self.remaining_squeeze > 1e-9:
            delta = min(self.speed_mm, self.remaining_squeeze)
            self.remaining_squeeze -= delta
            return -delta
        self.done = True
        return 0.0


class SlipStabilizeController:
    """Tighten while the slip probability stays above threshold.

    Slip evidence outlives the slip itself (old frames stay in the window),
    so commanded travel is capped at a proprioceptive budget; the controller
    tracks only its own commands, never the simulator state.
    """

    def __init__(self, events, tighten_mm: float, tau: float, budget_mm: float = 2.5,
                 slip_class: EventClass = EventClass.TRANSLATIONAL_SLIP):
        self.events = events
        self.tighten_mm = float(tighten_mm)
        self.tau = float(tau)
        self.budget_mm = float(budget_mm)
        self.tightened_mm = 0.0
        self.slip_class = slip_class
        self.last_prob = 0.0
        self.last_output: Optional[ev.ClassifierOutput] = None

    def update(self, frame) -> float:
        out = self.events.push(frame)
        self.last_output = out
        self.last_prob = float(out.probabilities[self.slip_class.value])
        if not out.stale and self.last_prob > self.tau:
            step = min(self.tighten_mm, self.budget_mm - self.tightened_mm)
            if step > 1e-12:
                self.tightened_mm += step
                return -step
        return 0.0


class HoldController:
    """Open-loop stand-in during lift phases: keep the opening fixed."""

    def __init__(self, events=None):
        self.events = events
        self.last_prob = 0.0

    def update(self, frame) -> float:
        if self.events is not None:
            out = self.events.push(frame)
            self.last_prob = float(out.probabilities[EventClass.TRANSLATIONAL_SLIP.value])
        return 0.0


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepLog:
    t: int
    opening_mm: float
    force_n: float
    label: int  # -1 while the event source is stale or absent
    slip_prob: float
    delta_mm: float


@dataclass
class GraspTrial:
    scenario: GraspScenario
    mode: str
    log: list
    outcome: str  # success | drop | crush
    sustained_weights: int = 0
    first_contact_step: Optional[int] = None
    halt_step: Optional[int] = None


def _log_step(log, world, controller, delta):
    out = getattr(controller, "last_output", None)
    label = -1
    prob = getattr(controller, "last_prob", 0.0)
    if out is not None and not out.stale:
        label = int(out.label.value)
        prob = float(out.probabilities[EventClass.TRANSLATIONAL_SLIP.value])
    log.append(StepLog(world.t - 1, world.gripper.opening_mm, world.gripper.force_n,
                       label, prob, delta))


def run_contact_detection_trial(
    scenario: GraspScenario,
    mode: str,
    models=None,
    params: SimParams = SimParams(),
) -> GraspTrial:
    """Close on the object, lift, and hold; outcome judged by the simulator.

    Open-loop closes to the noisy measured opening minus a fixed margin.
    Closed-loop closes until the classifier reports making contact (models
    is the event source, or a (params, config) pair for StreamClassifier);
    if it never fires the fingers keep closing and the crush is recorded as
    a plain failed trial.
    """
    if mode not in ("open_loop", "closed_loop"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    world = GraspWorld(scenario, params, mode=mode)
    if mode == "open_loop":
        target = scenario.measured_opening_mm - params.squeeze_margin_mm
        controller = OpenLoopController(max(0.0, target), params.speed_mm)
        controller.start(world.gripper.opening_mm)
    else:
        if models is None:
            raise ConfigurationError("closed-loop trials need an event source")
        events = models if hasattr(models, "push") else StreamClassifier(*models)
        controller = ContactDetectController(events, params.speed_mm, params.detect_squeeze_mm)

    log: list[StepLog] = []
    frame = fd.DisplacementFrame(np.zeros((fd.CHANNELS, fd.GRID_H, fd.GRID_W), dtype=np.float32))
    halt_step = None
    # Closing phase: a stuck closed-loop controller bottoms out and crushes.
    max_close_steps = int((world.gripper.opening_mm / params.speed_mm) + 8)
    for _ in range(max_close_steps):
        delta = controller.update(frame.data)
        world, frame = step_sim(world, delta)
        _log_step(log, world, controller, delta)
        if controller.done:
            halt_step = world.t - 1
            break
        if world.status == "crushed":
            break
    if mode == "closed_loop" and controller.fired_step is not None:
        halt_step = controller.fired_step  # where the approach actually stopped
    if world.status == "crushed":
        outcome = "crush"
    elif world.status == "ok":
        world.lift()
        for _ in range(params.hold_steps):
            delta = controller.update(frame.data)
            world, frame = step_sim(world, delta)
            _log_step(log, world, controller, delta)
            if world.status != "ok":
                break
        outcome = {"ok": "success", "dropped": "drop", "crushed": "crush"}[world.status]
        if outcome == "success" and world.cum_slide_mm > params.slip_tol_mm:
            outcome = "drop"  # still creeping at the end of the hold
    else:
        outcome = "drop"
    return GraspTrial(scenario, mode, log, outcome,
                      first_contact_step=world.first_contact_step,
                      halt_step=halt_step)


def _establish_grasp(world: GraspWorld, squeeze_mm: float, params: SimParams):
    """Deterministic pre-grasp shared by both slip-trial modes."""
    frame = fd.DisplacementFrame(np.zeros((fd.CHANNELS, fd.GRID_H, fd.GRID_W), dtype=np.float32))
    target = world.scenario.object_width_mm - squeeze_mm
    log: list[StepLog] = []
    guard = int(world.gripper.opening_mm / params.speed_mm) + 8
    holder = HoldController()
    for _ in range(guard):
        gap = target - world.gripper.opening_mm
        if abs(gap) < 1e-9:
            break
        delta = float(np.clip(gap, -params.speed_mm, params.speed_mm))
        world, frame = step_sim(world, delta)
        _log_step(log, world, holder, delta)
    return frame, log


def run_slip_stabilization_trial(
    scenario: GraspScenario,
    mode: str,
    models=None,
    params: SimParams = SimParams(),
    initial_squeeze_mm: float = 1.35,
) -> GraspTrial:
    """Hang scheduled weights on a held object and count what survives.

    Both modes start from the same grasp.  Open-loop keeps the opening
    fixed; closed-loop tightens while the slip probability from `models`
    (an event source, (params, config) classifier pair, or
    ((p_params, p_cfg), (c_params, c_cfg)) cascade pair) exceeds tau.
    """
    if mode not in ("open_loop", "closed_loop"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    world = GraspWorld(scenario, params, mode=mode)
    frame, log = _establish_grasp(world, initial_squeeze_mm, params)
    if mode == "closed_loop":
        if models is None:
            raise ConfigurationError("closed-loop trials need an event source")
        if hasattr(models, "push"):
            events = models
        elif isinstance(models[1], ev.ClassifierConfig):
            events = StreamClassifier(*models)
        else:
            events = CascadeEventSource(*models)
        controller = SlipStabilizeController(events, params.tighten_mm, params.slip_tau,
                                             budget_mm=params.max_tighten_mm)
    else:
        controller = HoldController()
    world.lift()

    added = 0
    pending = list(scenario.load_schedule_n)
    total_steps = params.load_interval_steps * (len(pending) + 1) + params.hold_steps
    for step_i in range(total_steps):
        if pending and step_i > 0 and step_i % params.load_interval_steps == 0:
            world.add_weight(pending.pop(0))
            added += 1
        delta = controller.update(frame.data)
        world, frame = step_sim(world, delta)
        _log_step(log, world, controller, delta)
        if world.status != "ok":
            break
    outcome = {"ok": "success", "dropped": "drop", "crushed": "crush"}[world.status]
    # A weight counts as sustained only if the grasp survived it.
    sustained = added if world.status == "ok" else max(0, added - 1)
    return GraspTrial(scenario, mode, log, outcome, sustained_weights=sustained,
                      first_contact_step=world.first_contact_step)


# ---------------------------------------------------------------------------
# Experiment suite
# ---------------------------------------------------------------------------


def run_experiment_suite(
    models,
    n_trials: int = 10,
    seed: int = 0,
    params: SimParams = SimParams(),
    objects: Sequence[int] = tuple(range(len(OBJECT_PRESETS))),
) -> dict:
    """Contact-detection success rates: modes x objects, plus the average.

    Returns {mode: {object_name: rate, ..., "average": rate}}; trials are
    seeded per (mode, object, trial) so the suite is reproducible.  `models`
    is a (params, config) classifier pair or a zero-argument factory (class
    or callable) built fresh for each closed-loop trial, so no event-source
    state leaks between trials.
    """

    def fresh_source():
        if isinstance(models, tuple):
            return models
        if inspect.isclass(models) or (callable(models) and not hasattr(models, "push")):
            return models()
        return models

    summary: dict[str, dict[str, float]] = {}
    for mode in ("open_loop", "closed_loop"):
        per_object = {}
        for oi in objects:
            wins = 0
            for k in range(n_trials):
                trial_seed = int(nx.rng_from(seed, mode, oi, k).integers(0, 2**62))
                scenario = scenario_from_preset(oi, trial_seed)
                source = fresh_source() if mode == "closed_loop" else None
                trial = run_contact_detection_trial(scenario, mode, source, params)
                wins += trial.outcome == "success"
            per_object[OBJECT_PRESETS[oi % len(OBJECT_PRESETS)][0]] = wins / n_trials
        per_object["average"] = float(np.mean([v for v in per_object.values()]))
        summary[mode] = per_object
    return summary


def write_grasp_csv(path, summary: dict) -> None:
    """Two data rows (modes) by object columns plus the trailing average."""
    modes = list(summary)
    columns = [c for c in summary[modes[0]] if c != "average"] + ["average"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode"] + columns)
        for mode in modes:
            w.writerow([mode] + [f"{summary[mode][c]:.3f}" for c in columns])


# ---------------------------------------------------------------------------
# Scenario config files
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """Flat key = value config: ints, floats, strings, and comma lists.

    Lines starting with # are comments.  Values holding commas become lists
    with each element coerced independently.
    """

    def coerce(tok: str):
        tok = tok.strip()
        try:
            return int(tok)
        except ValueError:
            pass
        try:
            return float(tok)
        except ValueError:
            pass
        return tok

    out: dict = {}
    for ln, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {ln}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise FormatError(f"line {ln}: empty key")
        if key in out:
            raise FormatError(f"line {ln}: duplicate key {key!r}")
        value = value.strip()
        if "," in value:
            out[key] = [coerce(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = coerce(value)
    return out


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())
