"""Motion features: disc rendering, feature encoding, the learnable extractor,
the Charbonnier motion-distillation loss, flow fields, and the ECMS metric.

The feature encoder is deliberately appearance-poor: it reads only coverage
and screen velocity, never color, so identical motion under different
coloring produces bit-identical features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DimensionMismatch, ParseError
from .scene import Camera

POOL = 8
DEFAULT_DISC_RADIUS = 2.0
DEFAULT_DISC_ALPHA = 0.6

TENSOR_MAGIC = b"MPHT"


@dataclass
class RenderedFrame:
    """Color image, screen-space velocity map (px/s), and alpha coverage."""

    color: np.ndarray     # (H, W, 3) in [0, 1]
    velocity: np.ndarray  # (H, W, 2) px/s
    alpha: np.ndarray     # (H, W) accumulated coverage in [0, 1]


@njit(cache=True, nogil=True)
def _splat_discs(order, u, v, depth, colors, vel_u, vel_v, img, vel_map, alpha_map,
                 radius, alpha):
    H, W = alpha_map.shape
    r2 = radius * radius
    for oi in range(order.shape[0]):
        p = order[oi]
        if depth[p] <= 0.0:
            continue
        cu = u[p]
        cv = v[p]
        px0 = int(np.floor(cu - radius))
        px1 = int(np.ceil(cu + radius))
        py0 = int(np.floor(cv - radius))
        py1 = int(np.ceil(cv + radius))
        if px1 < 0 or py1 < 0 or px0 >= W or py0 >= H:
            continue
        for py in range(max(0, py0), min(H, py1 + 1)):
            dv = py + 0.5 - cv
            for px in range(max(0, px0), min(W, px1 + 1)):
                du = px + 0.5 - cu
                if du * du + dv * dv > r2:
                    continue
                one_m = 1.0 - alpha
                img[py, px, 0] = img[py, px, 0] * one_m + colors[p, 0] * alpha
                img[py, px, 1] = img[py, px, 1] * one_m + colors[p, 1] * alpha
                img[py, px, 2] = img[py, px, 2] * one_m + colors[p, 2] * alpha
                vel_map[py, px, 0] = vel_map[py, px, 0] * one_m + vel_u[p] * alpha
                vel_map[py, px, 1] = vel_map[py, px, 1] * one_m + vel_v[p] * alpha
                alpha_map[py, px] = alpha_map[py, px] * one_m + alpha
    return 0


def render_frame(
    positions: np.ndarray,
    velocities: np.ndarray,
    colors: np.ndarray,
    camera: Camera,
    radius_px: float = DEFAULT_DISC_RADIUS,
    alpha: float = DEFAULT_DISC_ALPHA,
) -> RenderedFrame:
    """Z-sorted back-to-front disc splatting through the orthographic camera."""
    H, W = camera.height, camera.width
    img = np.zeros((H, W, 3))
    vel_map = np.zeros((H, W, 2))
    alpha_map = np.zeros((H, W))
    if len(positions):
        u, v, depth = camera.project(positions)
        vel_u, vel_v = camera.project_velocity(velocities)
        order = np.argsort(depth, kind="stable")[::-1].copy()  # far first
        _splat_discs(
            order, u, v, depth, np.asarray(colors, dtype=float),
            vel_u, vel_v, img, vel_map, alpha_map, radius_px, alpha,
        )
    return RenderedFrame(color=img, velocity=vel_map, alpha=alpha_map)


def _pool(a: np.ndarray) -> np.ndarray:
    H, W = a.shape
    return a.reshape(H // POOL, POOL, W // POOL, POOL).mean(axis=(1, 3))


def encode_motion_features(
    frames: list[RenderedFrame], pixel_scale: float, v_ref: float = 1.0
) -> np.ndarray:
    """Per-frame (occupancy, velocity-x, velocity-y) volume at 1/8 resolution.

    Velocity channels are converted back to m/s via `pixel_scale` and
    normalized by `v_ref` to stay O(1) across scenes.
    """
    if not frames:
        raise DimensionMismatch("need at least one frame")
    H, W = frames[0].alpha.shape
    if H % POOL or W % POOL:
        raise DimensionMismatch(f"frame size {H}x{W} not divisible by {POOL}")
    out = np.empty((len(frames), 3, H // POOL, W // POOL))
    for i, fr in enumerate(frames):
        if fr.alpha.shape != (H, W):
            raise DimensionMismatch("frames have inconsistent dimensions")
        out[i, 0] = _pool(fr.alpha)
        out[i, 1] = _pool(fr.velocity[:, :, 0]) * pixel_scale / v_ref
        out[i, 2] = _pool(fr.velocity[:, :, 1]) * pixel_scale / v_ref
    return out


# ---------------------------------------------------------------------------
# learnable motion extractor

def _conv2d(z: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 same-size convolution over (L, C, H, W) with zero padding."""
    zp = np.pad(z, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = np.lib.stride_tricks.sliding_window_view(zp, (3, 3), axis=(2, 3))
    return np.einsum("lchwij,ocij->lohw", patches, W) + b[None, :, None, None]


def _conv2d_grads(z: np.ndarray, W: np.ndarray, dy: np.ndarray):
    """Gradients of a 3x3 conv: (dW, db, dz)."""
    zp = np.pad(z, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = np.lib.stride_tricks.sliding_window_view(zp, (3, 3), axis=(2, 3))
    dW = np.einsum("lchwij,lohw->ocij", patches, dy)
    db = dy.sum(axis=(0, 2, 3))
    W_flip = W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dz = _conv2d(dy, W_flip, np.zeros(W.shape[1]))
    return dW, db, dz


@dataclass
class LmdConfig:
    beta: float = 1e-3
    w_k: float = 1.0
    learning_rate: float = 2e-5
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


class MotionExtractor:
    """Two 3x3 convolution layers, identity-initialized, with an EMA shadow.

    The layers are linear (no activation between them), so identity
    initialization makes forward(z) == z bit-exactly and keeps the
    gradients in closed form.
    """

    def __init__(self, channels: int = 3):
        self.channels = channels
        self.W1 = self._identity_kernel(channels)
        self.W2 = self._identity_kernel(channels)
        self.b1 = np.zeros(channels)
        self.b2 = np.zeros(channels)
        self.ema = {name: getattr(self, name).copy() for name in ("W1", "W2", "b1", "b2")}

    @staticmethod
    def _identity_kernel(channels: int) -> np.ndarray:
        W = np.zeros((channels, channels, 3, 3))
        for c in range(channels):
            W[c, c, 1, 1] = 1.0
        return W

    def forward(self, z: np.ndarray) -> np.ndarray:
        if z.shape[1] != self.channels:
            raise DimensionMismatch(
                f"expected {self.channels} channels, got {z.shape[1]}"
            )
        return _conv2d(_conv2d(z, self.W1, self.b1), self.W2, self.b2)

    def forward_ema(self, z: np.ndarray) -> np.ndarray:
        if z.shape[1] != self.channels:
            raise DimensionMismatch(
                f"expected {self.channels} channels, got {z.shape[1]}"
            )
        return _conv2d(
            _conv2d(z, self.ema["W1"], self.ema["b1"]), self.ema["W2"], self.ema["b2"]
        )

    def update_ema(self, decay: float) -> None:
        for name in ("W1", "W2", "b1", "b2"):
            self.ema[name] = decay * self.ema[name] + (1.0 - decay) * getattr(self, name)


def lmd_loss(y_pred: np.ndarray, y_target: np.ndarray, cfg: LmdConfig) -> float:
    """Charbonnier distance w_k * sqrt(||d||^2 + beta^2); floor is w_k * beta."""
    if y_pred.shape != y_target.shape:
        raise DimensionMismatch(f"shape mismatch {y_pred.shape} vs {y_target.shape}")
    d2 = float(np.sum((y_pred - y_target) ** 2))
    return cfg.w_k * float(np.sqrt(d2 + cfg.beta * cfg.beta))


def train_extractor_step(
    extractor: MotionExtractor,
    z_target: np.ndarray,
    z_pred: np.ndarray,
    cfg: LmdConfig,
) -> float:
    """One SGD step on the extractor weights, then the EMA update.

    Minimizes lmd_loss(M(z_pred), M_ema(z_target)); the EMA branch is
    treated as a constant target.
    """
    y_target = extractor.forward_ema(z_target)
    a1 = _conv2d(z_pred, extractor.W1, extractor.b1)
    y_pred = _conv2d(a1, extractor.W2, extractor.b2)
    diff = y_pred - y_target
    loss = cfg.w_k * float(np.sqrt(np.sum(diff * diff) + cfg.beta * cfg.beta))
    dy = cfg.w_k * diff / (loss / cfg.w_k)
    dW2, db2, da1 = _conv2d_grads(a1, extractor.W2, dy)
    dW1, db1, _ = _conv2d_grads(z_pred, extractor.W1, da1)
    lr = cfg.learning_rate
    extractor.W1 -= lr * dW1
    extractor.b1 -= lr * db1
    extractor.W2 -= lr * dW2
    extractor.b2 -= lr * db2
    extractor.update_ema(cfg.ema_decay)
    return loss


# ---------------------------------------------------------------------------
# flow fields and ECMS

@njit(cache=True, nogil=True)
def _splat_flow(u, v, depth, du, dv, flow_sum, weight, radius):
    H = flow_sum.shape[0]
    W = flow_sum.shape[1]
    r2 = radius * radius
    for p in range(u.shape[0]):
        if depth[p] <= 0.0:
            continue
        cu = u[p]
        cv = v[p]
        px0 = int(np.floor(cu - radius))
        px1 = int(np.ceil(cu + radius))
        py0 = int(np.floor(cv - radius))
        py1 = int(np.ceil(cv + radius))
        for py in range(max(0, py0), min(H, py1 + 1)):
            ddv = py + 0.5 - cv
            for px in range(max(0, px0), min(W, px1 + 1)):
                ddu = px + 0.5 - cu
                if ddu * ddu + ddv * ddv > r2:
                    continue
                flow_sum[py, px, 0] += du[p]
                flow_sum[py, px, 1] += dv[p]
                weight[py, px] += 1.0
    return 0


def flow_from_snapshots(
    traj, camera: Camera, radius_px: float = DEFAULT_DISC_RADIUS
) -> list[np.ndarray]:
    """Exact per-pixel mean screen displacement between consecutive frames."""
    flows = []
    for l in range(traj.n_frames - 1):
        u0, v0, depth = camera.project(traj.positions[l].astype(float))
        u1, v1, _ = camera.project(traj.positions[l + 1].astype(float))
        flow_sum = np.zeros((camera.height, camera.width, 2))
        weight = np.zeros((camera.height, camera.width))
        _splat_flow(u0, v0, depth, u1 - u0, v1 - v0, flow_sum, weight, radius_px)
        covered = weight > 0
        flow = np.zeros_like(flow_sum)
        flow[covered] = flow_sum[covered] / weight[covered][:, None]
        flows.append(flow)
    return flows


def _laplacian(flow: np.ndarray) -> np.ndarray:
    """5-point stencil per channel with replicated edges (zero on uniform flow)."""
    p = np.pad(flow, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return (
        p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1]
    )


def ecms(flows: list[np.ndarray], eps_guard: float = 1e-6) -> float:
    """Inverse total flow magnitude + temporal and spatial smoothness penalties."""
    if eps_guard <= 0:
        raise ValueError("eps_guard must be positive")
    total_mag = sum(float(np.linalg.norm(f)) for f in flows)
    inv_term = 1.0 / max(total_mag, eps_guard)
    temporal = 0.0
    for a, b in zip(flows[1:], flows[:-1]):
        temporal += float(np.sum((a - b) ** 2))
    spatial = 0.0
    for f in flows:
        spatial += float(np.sum(_laplacian(f) ** 2))
    return inv_term + temporal + spatial


# ---------------------------------------------------------------------------
# binary exports

def write_ppm(color: np.ndarray, path) -> None:
    """Binary P6 at 8 bits per channel; bit-exact across runs."""
    H, W, _ = color.shape
    data = np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (W, H))
        f.write(data.tobytes())


def save_tensor(array: np.ndarray, path) -> None:
    """MPHT tensor container: magic, u16 rank, u32 dims, f32 little-endian."""
    a = np.asarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<H", a.ndim))
        for d in a.shape:
            f.write(struct.pack("<I", d))
        f.write(a.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != TENSOR_MAGIC:
            raise ParseError("bad tensor magic")
        (rank,) = struct.unpack("<H", f.read(2))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(shape)
