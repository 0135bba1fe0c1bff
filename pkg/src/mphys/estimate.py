"""Parameter estimation: language-model initialization and gradient refinement.

Initialization builds a range-constrained prompt, sends it to a pluggable
backend (HTTP, canned mock, or transcript replay), and validates the JSON
answer into MaterialParams. Refinement then runs finite-difference Adam over
the scaled class coefficients against a reference trajectory, supervising
interleaved frame subsequences in round robin.
"""

from __future__ import annotations

import base64
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BackendUnavailable,
    InitFailed,
    NoJsonFound,
    ParticleOutOfDomain,
    Unstable,
    ValidationError,
)
from .material import (
    ClampEvent,
    MaterialClass,
    MaterialParams,
    clamp_to_range,
    params_from_json_dict,
    range_catalog,
    scale_value,
    scaled_bounds,
    unscale,
)
from .motion import LmdConfig, MotionExtractor, encode_motion_features, lmd_loss, render_frame, train_extractor_step
from .mpm import Trajectory, simulate
from .scene import SceneConfig, perturbation_offsets

LLM_URL_ENV = "MPHYS_LLM_URL"
LLM_TOKEN_ENV = "MPHYS_LLM_TOKEN"
HTTP_TIMEOUT_S = 60.0

_UNIT_TEXT = {"": "(unitless)", "Pa": "Pa", "Pa.s": "Pa·s", "kg/m^3": "kg/m³"}


@dataclass(frozen=True)
class InitRequest:
    """One initialization query: text prompt plus optional visual reference."""

    prompt: str
    image_path: str | None = None
    class_hint: MaterialClass | None = None

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValidationError("prompt must be non-empty")


def _format_range(r) -> str:
    if r.unit == "deg":
        return f"{r.name}: {r.lower:g} – {r.upper:g}°"
    unit = _UNIT_TEXT.get(r.unit, r.unit)
    if unit:
        return f"{r.name}: {r.lower:g} – {r.upper:g} {unit}"
    return f"{r.name}: {r.lower:g} – {r.upper:g}"


def build_prompt(req: InitRequest) -> str:
    """Render the full inquiry prompt: question, parameter lists, ranges, format."""
    lines = []
    lines.append("Inputs:")
    lines.append(f'- Textual simulation prompt: "{req.prompt}"')
    if req.image_path:
        lines.append(f"- Reference image: {req.image_path}")
    lines.append("")
    lines.append(
        "Q: What is this object? Based primarily on the textual simulation "
        "prompt, determine the most appropriate material type. Then estimate "
        "its density (kg/m³) and relevant physical parameters. Use the image "
        "as secondary visual reference only."
    )
    if req.class_hint is not None:
        lines.append(f"Hint: the expected material type is {req.class_hint.value}.")
    lines.append("")
    lines.append("Warning: Material types and required parameters (with SI units):")
    for cls in MaterialClass:
        fields = ", ".join(
            f"{r.name} ({_UNIT_TEXT.get(r.unit, r.unit) if r.unit != 'deg' else '°'})"
            for r in range_catalog(cls)[:-1]
        )
        lines.append(f"- {cls.value}: {fields}")
    lines.append("")
    lines.append(
        "Warning: All inferred physical parameters must strictly fall within "
        "the following valid ranges:"
    )
    for cls in MaterialClass:
        ranges = range_catalog(cls)[:-1]
        if len(ranges) == 1:
            lines.append(f"- {cls.value}: {_format_range(ranges[0])}")
        else:
            lines.append(f"- {cls.value}:")
            for r in ranges:
                lines.append(f"  - {_format_range(r)}")
    density = range_catalog(MaterialClass.ELASTIC)[-1]
    lines.append(f"- Density: {_format_range(density)}")
    lines.append("")
    lines.append("Respond in this exact format:")
    lines.append("{")
    lines.append('  "material_type": "...",')
    lines.append('  "density": ...,')
    lines.append('  "E": ...,')
    lines.append('  "nu": ...,')
    lines.append('  "tau_Y": ...,')
    lines.append('  "mu": ...,')
    lines.append('  "kappa": ...,')
    lines.append('  "eta": ...,')
    lines.append('  "theta_fric": ...')
    lines.append("}")
    lines.append("Only include fields relevant to the inferred material type.")
    return "\n".join(lines)


def _extract_first_json(text: str) -> dict:
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise NoJsonFound(f"no JSON object found in response: {text[:200]!r}")


def parse_init_response(text: str) -> tuple[MaterialParams, list[ClampEvent]]:
    """First JSON object in the response, validated and clamped into range."""
    data = _extract_first_json(text)
    params = params_from_json_dict(data)
    return clamp_to_range(params)


# ---------------------------------------------------------------------------
# backends

class LlmBackend:
    def send(self, prompt: str, image_path: str | None = None) -> str:
        raise NotImplementedError


# Canned responses matched by keyword against the prompt (deterministic,
# first match in declaration order). The axe answer mirrors a typical
# metal identification.
DEFAULT_CANNED = (
    ("axe", '{"material_type": "Metal", "density": 7850, "E": 2.1e11, '
            '"nu": 0.30, "tau_Y": 2.5e8}'),
    ("water", '{"material_type": "Newtonian fluid", "density": 1000, '
              '"mu": 1.0e-3, "kappa": 2.0e9}'),
    ("honey", '{"material_type": "Newtonian fluid", "density": 1400, '
              '"mu": 10.0, "kappa": 2.0e9}'),
    ("toothpaste", '{"material_type": "Non-Newtonian fluid", "density": 1300, '
                   '"mu": 100.0, "kappa": 2.0e9, "tau_Y": 200, "eta": 0.3}'),
    ("sand", '{"material_type": "Sand", "density": 1600, "theta_fric": 35}'),
    ("clay", '{"material_type": "Plasticine", "density": 1800, "E": 2.0e6, '
             '"nu": 0.35, "tau_Y": 1.0e4}'),
    ("foam", '{"material_type": "Foam", "density": 100, "E": 1.0e5, '
             '"nu": 0.2, "tau_Y": 5.0e4, "eta": 0.5}'),
    ("rubber", '{"material_type": "Elastic", "density": 1100, "E": 1.0e7, '
               '"nu": 0.45}'),
)

_FALLBACK_ANSWER = (
    '{"material_type": "Elastic", "density": 1000, "E": 5.0e7, "nu": 0.3}'
)


class MockBackend(LlmBackend):
    """Offline backend with keyword-keyed canned JSON answers."""

    def __init__(self, canned=DEFAULT_CANNED, fallback: str = _FALLBACK_ANSWER):
        self.canned = tuple(canned)
        self.fallback = fallback

    def send(self, prompt: str, image_path: str | None = None) -> str:
        low = prompt.lower()
        # match only the user's own words: the rendered inquiry text itself
        # names every material class
        marker = "textual simulation prompt:"
        if marker in low:
            low = low.split(marker, 1)[1].splitlines()[0]
        for key, answer in self.canned:
            if key in low:
                return answer
        return self.fallback


class ReplayBackend(LlmBackend):
    """Replays responses recorded in a transcript file, in order."""

    def __init__(self, path):
        with open(path) as f:
            doc = json.load(f)
        self.responses = list(doc["responses"])
        if not self.responses:
            raise ValidationError(f"transcript {path} contains no responses")
        self._cursor = 0

    def send(self, prompt: str, image_path: str | None = None) -> str:
        text = self.responses[min(self._cursor, len(self.responses) - 1)]
        self._cursor += 1
        return text


class HttpBackend(LlmBackend):
    """POSTs {prompt, optional base64 image} to the configured endpoint."""

    def __init__(self, url: str | None = None, token: str | None = None):
        self.url = url or os.environ.get(LLM_URL_ENV)
        self.token = token or os.environ.get(LLM_TOKEN_ENV)
        if not self.url:
            raise BackendUnavailable(
                f"no endpoint configured: set {LLM_URL_ENV} (and {LLM_TOKEN_ENV}) "
                "or use the mock backend"
            )

    def send(self, prompt: str, image_path: str | None = None) -> str:
        import requests

        body = {"prompt": prompt}
        if image_path:
            with open(image_path, "rb") as f:
                body["image"] = base64.b64encode(f.read()).decode()
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            resp = requests.post(
                self.url, json=body, headers=headers, timeout=HTTP_TIMEOUT_S
            )
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise BackendUnavailable(f"LLM endpoint failed: {exc}") from None
        return resp.text


_RETRY_SUFFIX = (
    "\nYour previous reply could not be parsed. Respond with exactly one JSON "
    "object in the requested format and nothing else."
)


@dataclass
class InitResult:
    params: MaterialParams
    clamp_events: list[ClampEvent]
    transcript: list[dict]
    retried: bool


def initialize(req: InitRequest, backend: LlmBackend) -> InitResult:
    """Prompt, parse, and clamp; one retry with a clarification on bad output."""
    prompt = build_prompt(req)
    transcript = []
    last_error = None
    for attempt, text in enumerate((prompt, prompt + _RETRY_SUFFIX)):
        response = backend.send(text, req.image_path)
        transcript.append({"prompt": text, "response": response})
        try:
            params, events = parse_init_response(response)
            return InitResult(
                params=params, clamp_events=events, transcript=transcript,
                retried=attempt > 0,
            )
        except Exception as exc:
            last_error = exc
    raise InitFailed(f"could not parse backend response after retry: {last_error}")


# ---------------------------------------------------------------------------
# frame boosting

def frame_boost_subsequences(n_frames: int, m_boost: int) -> list[list[int]]:
    """M interleaved 1-based index lists {i, i+M, ...}; disjoint, covering."""
    if m_boost < 1:
        raise ValidationError("boosting factor must be >= 1")
    if n_frames < m_boost:
        raise ValidationError(
            f"need at least {m_boost} frames for boosting factor {m_boost}"
        )
    # slicing one materialized range is measurably faster than building each
    # sublist from its own range when m_boost is large
    frames = list(range(1, n_frames + 1))
    return [frames[i::m_boost] for i in range(m_boost)]


# ---------------------------------------------------------------------------
# optimization

@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 40
    fd_step: float = 0.05
    learning_rate: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    m_boost: int = 8
    plateau_tol: float = 1e-4
    plateau_window: int = 5
    v_ref: float = 1.0
    fd_workers: int = 1
    # Relative slack above the Charbonnier floor below which an iterate is
    # treated as converged (no update step; FD noise would otherwise walk it).
    floor_slack: float = 1e-6

    def __post_init__(self):
        if self.fd_step <= 0:
            raise ValidationError("FD step must be positive")
        if self.m_boost < 1:
            raise ValidationError("boosting factor must be >= 1")


@dataclass
class EstimationReport:
    initial_params: MaterialParams
    final_params: MaterialParams
    loss_trace: list[float] = field(default_factory=list)
    param_trace: list[dict] = field(default_factory=list)
    clamp_events: list[ClampEvent] = field(default_factory=list)
    wall_time_s: float = 0.0
    stop_reason: str = ""
    unstable_evals: int = 0
    transcript: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "initial_params": self.initial_params.to_json_dict(),
            "final_params": self.final_params.to_json_dict(),
            "loss_trace": self.loss_trace,
            "param_trace": self.param_trace,
            "clamp_events": [
                {"field": e.field, "original": e.original, "clamped": e.clamped}
                for e in self.clamp_events
            ],
            "wall_time_s": self.wall_time_s,
            "stop_reason": self.stop_reason,
            "unstable_evals": self.unstable_evals,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2)

    def save_loss_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("iteration,loss\n")
            for i, loss in enumerate(self.loss_trace):
                f.write(f"{i},{loss}\n")


class EstimationContext:
    """Precomputed reference features and shared state for loss evaluations."""

    def __init__(
        self,
        scene: SceneConfig,
        reference: Trajectory,
        material_class: MaterialClass,
        density: float,
        cfg: OptimizerConfig,
        extractor: MotionExtractor | None = None,
        lmd: LmdConfig | None = None,
    ):
        if reference.n_frames < scene.stepping.frames:
            raise ValidationError(
                f"reference has {reference.n_frames} frames, scene needs "
                f"{scene.stepping.frames}"
            )
        self.scene = scene
        self.reference = reference
        self.material_class = material_class
        self.density = density
        self.cfg = cfg
        self.extractor = extractor or MotionExtractor()
        self.lmd = lmd or LmdConfig()
        self.subsequences = frame_boost_subsequences(
            scene.stepping.frames, cfg.m_boost
        )
        n = reference.n_particles
        self.dx, self.dc = perturbation_offsets(n, scene.perturb)
        self.target_features = [
            self._encode(
                [reference.positions[f - 1] for f in sub],
                [reference.velocities[f - 1] for f in sub],
                [reference.colors[f - 1] for f in sub],
            )
            for sub in self.subsequences
        ]
        self.unstable_evals = 0

    def _encode(self, positions, velocities, colors) -> np.ndarray:
        cam = self.scene.camera
        frames = [
            render_frame(
                x.astype(float) + self.dx,
                v.astype(float),
                np.clip(c.astype(float) + self.dc, 0.0, 1.0),
                cam,
            )
            for x, v, c in zip(positions, velocities, colors)
        ]
        return encode_motion_features(frames, cam.pixel_scale, self.cfg.v_ref)

    def params_from_coords(self, coords: np.ndarray) -> MaterialParams:
        """Scaled class coefficients (density held fixed) back to parameters.

        The exp/log round trip can overshoot a range bound by a few ulps, so
        the result is clamped back into the catalog box.
        """
        ranges = range_catalog(self.material_class)
        clipped = np.array([
            min(max(c, lo), hi)
            for c, (lo, hi) in zip(coords, map(scaled_bounds, ranges[:-1]))
        ])
        full = np.append(clipped, scale_value(ranges[-1], self.density))
        params = replace(unscale(self.material_class, full), density=self.density)
        clamped, _ = clamp_to_range(params)
        return clamped

    def evaluate(self, coords: np.ndarray, sub_index: int):
        """Loss on one subsequence; (+inf, None) on an unstable simulation."""
        params = self.params_from_coords(coords)
        groups = {g: params for g in self.scene.materials}
        frames = self.subsequences[sub_index]
        try:
            traj = simulate(self.scene, params_by_group=groups, record_frames=frames)
        except (Unstable, ParticleOutOfDomain):
            self.unstable_evals += 1
            return math.inf, None
        z_pred = self._encode(traj.positions, traj.velocities, traj.colors)
        y_pred = self.extractor.forward(z_pred)
        y_target = self.extractor.forward_ema(self.target_features[sub_index])
        return lmd_loss(y_pred, y_target, self.lmd), z_pred


def loss_for_params(coords: np.ndarray, ctx: EstimationContext, sub_index: int) -> float:
    loss, _ = ctx.evaluate(coords, sub_index)
    return loss


def fd_gradient(loss_fn, theta: np.ndarray, h: float, f0_fn=None, workers: int = 1) -> np.ndarray:
    """Central differences, one-sided away from unstable (+inf) evaluations.

    Exactly 2*dim evaluations when everything is finite; the center value
    `f0_fn` is only evaluated if a one-sided fallback needs it. Probe
    evaluations are independent simulations and run on `workers` threads;
    the assembled gradient does not depend on scheduling.
    """
    dim = len(theta)
    probes = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        probes.append(theta + e)
        probes.append(theta - e)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(loss_fn, probes))
    else:
        values = [loss_fn(p) for p in probes]

    f0_cache = [None]

    def f0():
        if f0_cache[0] is None:
            f0_cache[0] = loss_fn(theta) if f0_fn is None else f0_fn()
        return f0_cache[0]

    grad = np.zeros(dim)
    for i in range(dim):
        plus, minus = values[2 * i], values[2 * i + 1]
        if math.isinf(plus) and math.isinf(minus):
            grad[i] = 0.0
        elif math.isinf(plus):
            grad[i] = (f0() - minus) / h
        elif math.isinf(minus):
            grad[i] = (plus - f0()) / h
        else:
            grad[i] = (plus - minus) / (2.0 * h)
    return grad


def optimize(
    scene: SceneConfig,
    init_params: MaterialParams,
    reference: Trajectory,
    cfg: OptimizerConfig | None = None,
    extractor: MotionExtractor | None = None,
    lmd: LmdConfig | None = None,
) -> EstimationReport:
    """Finite-difference Adam over scaled class coefficients.

    Supervision alternates round-robin across the interleaved frame
    subsequences; the extractor takes one training step per iteration on
    the current (target, prediction) feature pair. Density and material
    class stay fixed at their initialized values.
    """
    cfg = cfg or OptimizerConfig()
    init_params.validate()
    start = time.monotonic()
    ctx = EstimationContext(
        scene, reference, init_params.material_class, init_params.density,
        cfg, extractor=extractor, lmd=lmd,
    )
    ranges = range_catalog(init_params.material_class)[:-1]
    theta = np.array([scale_value(r, init_params.get(r.name)) for r in ranges])
    floor = ctx.lmd.w_k * ctx.lmd.beta

    report = EstimationReport(initial_params=init_params, final_params=init_params)
    theta_init = theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    stop_reason = "max_iterations"
    for it in range(cfg.max_iterations):
        sub = it % cfg.m_boost
        loss, z_pred = ctx.evaluate(theta, sub)
        at_floor = loss <= floor * (1.0 + cfg.floor_slack)
        if not (at_floor or math.isinf(loss)):
            grad = fd_gradient(
                lambda th: loss_for_params(th, ctx, sub), theta, cfg.fd_step,
                f0_fn=lambda: loss, workers=cfg.fd_workers,
            )
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
            m_hat = m / (1.0 - cfg.beta1 ** (it + 1))
            v_hat = v / (1.0 - cfg.beta2 ** (it + 1))
            theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
            theta = np.array([
                min(max(t, lo), hi)
                for t, (lo, hi) in zip(theta, map(scaled_bounds, ranges))
            ])
        if z_pred is not None:
            train_extractor_step(
                ctx.extractor, ctx.target_features[sub], z_pred, ctx.lmd
            )
        report.loss_trace.append(loss)
        report.param_trace.append(ctx.params_from_coords(theta).to_json_dict())
        w = cfg.plateau_window
        if len(report.loss_trace) > w:
            prev = report.loss_trace[-1 - w]
            cur = report.loss_trace[-1]
            if math.isfinite(prev) and math.isfinite(cur):
                denom = max(abs(prev), 1e-30)
                if abs(cur - prev) / denom < cfg.plateau_tol:
                    stop_reason = "plateau"
                    break

    # keep the initialized parameters bit-exact if nothing ever moved
    if np.array_equal(theta, theta_init):
        report.final_params = init_params
    else:
        report.final_params = ctx.params_from_coords(theta)
    report.stop_reason = stop_reason
    report.unstable_evals = ctx.unstable_evals
    report.wall_time_s = time.monotonic() - start
    return report
