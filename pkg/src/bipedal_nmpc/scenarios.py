"""Built-in scenarios and the YAML scenario file format.

Keys carry their units (``step_length_m``, ``duration_s``); anything not
given falls back to the defaults of the corresponding dataclass. Unknown
keys are rejected with the line they appear on.
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import yaml

from .assembly import Bounds, StrategyToggles, Weights
from .gait import Profile, ReferenceOverrides, StepSpec
from .pendulum import ModelParams
from .qcqp import SqpSettings
from .sim import Disturbance, Scenario, ScenarioInvalid, SimConfig


class ScenarioFileError(ValueError):
    """Invalid scenario file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


# -- catalog --------------------------------------------------------------------

STAIRS_STEPS = (
    [StepSpec(0.15, 0.145, 0.0)]
    + [StepSpec(0.15, 0.145, 0.1)] * 3
    + [
        StepSpec(0.15, 0.2, 0.0),
        StepSpec(0.3, 0.14, 0.0),
        StepSpec(0.25, 0.14, -0.1),
        StepSpec(0.15, 0.2, -0.1),
        StepSpec(0.05, 0.145, 0.0),
        StepSpec(0.15, 0.145, 0.0),
    ]
)


def scenario_catalog() -> dict[str, Scenario]:
    """The canonical experiment scenarios keyed by name."""
    push_sim = SimConfig(duration=5.6)
    dip = Profile((0.0, 1.6, 2.4, 4.0, 4.8), (0.0, 0.0, -0.05, -0.05, 0.0))
    bow = Profile((0.0, 1.6, 2.4, 4.0, 4.8), (0.0, 0.0, 0.1, 0.1, 0.0))
    return {
        "stairs-3d": Scenario(
            "stairs-3d", STAIRS_STEPS, toggles=StrategyToggles.strategy(3),
            sim=SimConfig(duration=0.8 * 11),
        ),
        "step-in-place-push": Scenario(
            "step-in-place-push", (StepSpec(0.0, 0.145),), toggles=StrategyToggles.strategy(3),
            disturbances=(Disturbance(2.0, 0.1, (125.0, 0.0)),), sim=push_sim,
        ),
        "walk-forward-push": Scenario(
            "walk-forward-push", (StepSpec(0.15, 0.145),), toggles=StrategyToggles.strategy(3),
            disturbances=(Disturbance(2.0, 0.1, (125.0, 75.0)),), sim=push_sim,
        ),
        "narrow-passage": Scenario(
            "narrow-passage", (StepSpec(0.15, 0.145),), toggles=StrategyToggles.strategy(3),
            overrides=ReferenceOverrides(height=dip, pitch=bow), sim=SimConfig(duration=6.4),
        ),
        "timing-gait": Scenario(
            "timing-gait", (StepSpec(0.1, 0.145),), toggles=StrategyToggles.strategy(3),
            sim=SimConfig(dt_ctrl=0.1, dt_mpc=0.1, n_h=10, n_f=2, duration=8.0),
        ),
    }


# -- file format ------------------------------------------------------------------

# (file key, dataclass field) per section
_MODEL_KEYS = {"mass_kg": "m", "gravity_m_s2": "g", "inertia_roll_kg_m2": "I_x",
               "inertia_pitch_kg_m2": "I_y", "height_ref_m": "h_z_ref"}
_BOUND_KEYS = {"zmp_x_m": "p_x", "zmp_y_m": "p_y", "step_x_m": "d_x", "step_y_m": "d_y",
               "step_rate_x_m_s": "rate_x", "step_rate_y_m_s": "rate_y", "height_m": "h",
               "roll_rad": "theta_r", "pitch_rad": "theta_p", "torque_roll_n_m": "tau_r",
               "torque_pitch_n_m": "tau_p"}
_SIM_KEYS = {"dt_ctrl_s": "dt_ctrl", "dt_mpc_s": "dt_mpc", "horizon_samples": "n_h",
             "future_steps": "n_f", "duration_s": "duration", "zmp_margin_m": "zmp_margin",
             "fall_ticks": "fall_ticks", "divergence_m": "divergence", "swing_apex_m": "swing_apex",
             "transfer_samples": "transfer_samples",
             "zmp_guard_next_tick": "guard_next_tick"}
_SOLVER_KEYS = {"eps": "eps", "max_iterations": "n_s", "qp_max_iterations": "qp_max_iter",
                "relax_weight": "relax_weight"}
_WEIGHT_KEYS = {"alpha": "alpha", "beta": "beta", "gamma": "gamma", "delta": "delta"}
_TOGGLE_KEYS = {"step_adjust": "allow_step_adjust", "body_rotation": "allow_body_rotation",
                "height_variation": "allow_height_variation", "pin_next_only": "pin_next_only"}
_STEP_KEYS = {"step_length_m": "length", "step_width_m": "width", "step_height_m": "height",
              "duration_s": "duration"}
_OVERRIDE_KEYS = {"height_offset_m": "height", "roll_rad": "roll", "pitch_rad": "pitch"}
_TOP_KEYS = {"name", "strategy", "toggles", "first_side", "steps", "disturbances", "overrides",
             "model", "weights", "bounds", "sim", "solver"}


def _line_marks(text: str) -> dict:
    """1-based line of every mapping key / sequence item, keyed by path."""
    marks = {}

    def walk(node, path):
        marks.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                marks[path + (k.value,)] = k.start_mark.line + 1
                walk(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return marks


class _Reader:
    def __init__(self, marks: dict, source: str):
        self.marks, self.source = marks, source

    def fail(self, path, msg):
        line = None
        p = tuple(path)
        while line is None and p is not None:
            line = self.marks.get(p)
            p = p[:-1] if p else None
        raise ScenarioFileError(msg, line, self.source)

    def mapping(self, value, path, allowed) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, f"{'.'.join(map(str, path)) or 'document'} must be a mapping")
        for k in value:
            if k not in allowed:
                self.fail(tuple(path) + (k,), f"unknown key {k!r} (allowed: {', '.join(sorted(allowed))})")
        return value

    def number(self, value, path) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"{path[-1]} must be a number, got {value!r}")
        return float(value)

    def numbers(self, value, path, n=None) -> tuple:
        if not isinstance(value, list) or (n is not None and len(value) != n):
            self.fail(path, f"{path[-1]} must be a list of {n or 'some'} numbers")
        return tuple(self.number(v, tuple(path) + (i,)) for i, v in enumerate(value))

    def section(self, data, key, table, cls, default, conv):
        """Build ``cls`` from ``data[key]`` overriding fields of ``default``."""
        path = (key,)
        raw = self.mapping(data.get(key), path, table)
        kwargs = {table[k]: conv(v, path + (k,)) for k, v in raw.items()}
        try:
            return replace(default, **kwargs)
        except (ValueError, TypeError) as exc:
            self.fail(path, str(exc))


def _as_bool(reader: _Reader):
    def conv(v, path):
        if not isinstance(v, bool):
            reader.fail(path, f"{path[-1]} must be true or false")
        return v
    return conv


def _as_int(reader: _Reader):
    def conv(v, path):
        if isinstance(v, bool) or not isinstance(v, int):
            reader.fail(path, f"{path[-1]} must be an integer")
        return v
    return conv


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse scenario YAML, raising ``ScenarioFileError`` with the offending line."""
    try:
        data = yaml.safe_load(text)
        marks = _line_marks(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioFileError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                                mark.line + 1 if mark else None, source) from None
    rd = _Reader(marks, source)
    data = rd.mapping(data, (), _TOP_KEYS)
    num = rd.number
    pair = lambda v, p: rd.numbers(v, p, 2)

    name = data.get("name", Path(source).stem)
    if not isinstance(name, str):
        rd.fail(("name",), "name must be a string")
    first_side = data.get("first_side", "right")
    if first_side not in ("left", "right"):
        rd.fail(("first_side",), "first_side must be 'left' or 'right'")

    if "strategy" in data and "toggles" in data:
        rd.fail(("toggles",), "give either strategy or toggles, not both")
    if "strategy" in data:
        s = data["strategy"]
        if s not in (1, 2, 3, 4) or isinstance(s, bool):
            rd.fail(("strategy",), "strategy must be 1, 2, 3 or 4")
        toggles = StrategyToggles.strategy(s)
    else:
        toggles = rd.section(data, "toggles", _TOGGLE_KEYS, StrategyToggles, StrategyToggles(), _as_bool(rd))

    steps_raw = data.get("steps")
    if not isinstance(steps_raw, list) or not steps_raw:
        rd.fail(("steps",), "steps must be a non-empty list")
    steps = []
    for i, item in enumerate(steps_raw):
        path = ("steps", i)
        raw = rd.mapping(item, path, set(_STEP_KEYS) | {"repeat"})
        kw = {_STEP_KEYS[k]: num(v, path + (k,)) for k, v in raw.items() if k != "repeat"}
        repeat = raw.get("repeat", 1)
        if isinstance(repeat, bool) or not isinstance(repeat, int) or repeat < 1:
            rd.fail(path + ("repeat",), "repeat must be a positive integer")
        try:
            steps.extend([StepSpec(**kw)] * repeat)
        except ValueError as exc:
            rd.fail(path, str(exc))

    disturbances = []
    dist_raw = data.get("disturbances") or []
    if not isinstance(dist_raw, list):
        rd.fail(("disturbances",), "disturbances must be a list")
    for i, item in enumerate(dist_raw):
        path = ("disturbances", i)
        raw = rd.mapping(item, path, {"start_s", "duration_s", "force_x_n", "force_y_n"})
        for req in ("start_s", "duration_s"):
            if req not in raw:
                rd.fail(path, f"disturbance needs {req}")
        try:
            disturbances.append(Disturbance(
                num(raw["start_s"], path + ("start_s",)), num(raw["duration_s"], path + ("duration_s",)),
                (num(raw.get("force_x_n", 0.0), path + ("force_x_n",)),
                 num(raw.get("force_y_n", 0.0), path + ("force_y_n",))),
            ))
        except ScenarioInvalid as exc:
            rd.fail(path, str(exc))

    ov_raw = rd.mapping(data.get("overrides"), ("overrides",), _OVERRIDE_KEYS)
    ov = {}
    for key, attr in _OVERRIDE_KEYS.items():
        if key not in ov_raw:
            continue
        path = ("overrides", key)
        prof = rd.mapping(ov_raw[key], path, {"times_s", "values"})
        if set(prof) != {"times_s", "values"}:
            rd.fail(path, "profile needs times_s and values")
        try:
            ov[attr] = Profile(rd.numbers(prof["times_s"], path + ("times_s",)),
                               rd.numbers(prof["values"], path + ("values",)))
        except ValueError as exc:
            rd.fail(path, str(exc))

    params = rd.section(data, "model", _MODEL_KEYS, ModelParams, ModelParams(), num)
    weights = rd.section(data, "weights", _WEIGHT_KEYS, Weights, Weights(),
                         lambda v, p: rd.numbers(v, p, 3 if p[-1] == "delta" else 5))
    bounds = rd.section(data, "bounds", _BOUND_KEYS, Bounds, Bounds(), pair)
    int_keys = {"horizon_samples", "future_steps", "fall_ticks", "transfer_samples", "max_iterations", "qp_max_iterations"}
    mixed = lambda v, p: (_as_int(rd)(v, p) if p[-1] in int_keys
                          else _as_bool(rd)(v, p) if p[-1] == "zmp_guard_next_tick" else num(v, p))
    sim = rd.section(data, "sim", _SIM_KEYS, SimConfig, SimConfig(), mixed)
    sqp = rd.section(data, "solver", _SOLVER_KEYS, SqpSettings, SqpSettings(), mixed)
    try:
        return Scenario(name, tuple(steps), first_side, params, weights, bounds, toggles,
                        tuple(disturbances), ReferenceOverrides(**ov), sim, sqp)
    except ScenarioInvalid as exc:
        raise ScenarioFileError(str(exc), None, source) from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioFileError(f"cannot read file: {exc.strerror}", None, str(path)) from None
    return parse_scenario(text, str(path))


def _section_dict(obj, table, default) -> dict:
    out = {}
    for key, attr in table.items():
        val = getattr(obj, attr)
        if val != getattr(default, attr):
            out[key] = list(val) if isinstance(val, tuple) else val
    return out


def scenario_to_dict(sc: Scenario) -> dict:
    """Plain-data form of ``sc``; only non-default sections are emitted."""
    out: dict = {"name": sc.name}
    num = sc.toggles.number
    if num is not None and not sc.toggles.pin_next_only:
        out["strategy"] = num
    else:
        out["toggles"] = {k: getattr(sc.toggles, a) for k, a in _TOGGLE_KEYS.items()}
    out["first_side"] = sc.first_side
    out["steps"] = [{k: getattr(s, a) for k, a in _STEP_KEYS.items()} for s in sc.steps]
    if sc.disturbances:
        out["disturbances"] = [
            {"start_s": d.start, "duration_s": d.duration, "force_x_n": d.force[0], "force_y_n": d.force[1]}
            for d in sc.disturbances
        ]
    ov = {}
    for key, attr in _OVERRIDE_KEYS.items():
        prof = getattr(sc.overrides, attr)
        if prof != Profile.zero():
            ov[key] = {"times_s": list(prof.times), "values": list(prof.values)}
    if ov:
        out["overrides"] = ov
    for key, obj, table, default in (
        ("model", sc.params, _MODEL_KEYS, ModelParams()),
        ("weights", sc.weights, _WEIGHT_KEYS, Weights()),
        ("bounds", sc.bounds, _BOUND_KEYS, Bounds()),
        ("sim", sc.sim, _SIM_KEYS, SimConfig()),
        ("solver", sc.sqp, _SOLVER_KEYS, SqpSettings()),
    ):
        sec = _section_dict(obj, table, default)
        if sec:
            out[key] = sec
    return out


def dump_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False, default_flow_style=None)


def resolve_scenario(ref: str) -> Scenario:
    """Load ``ref`` as a file (``.yaml`` optional) or a catalog name."""
    p = Path(ref)
    for cand in (p, p.with_name(p.name + ".yaml"), p.with_name(p.name + ".yml")):
        if cand.is_file():
            return load_scenario(cand)
    cat = scenario_catalog()
    if p.name in cat:
        return cat[p.name]
    raise ScenarioFileError("no such scenario file or catalog entry", None, ref)
