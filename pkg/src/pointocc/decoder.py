"""Point-query decoder over multi-camera feature pyramids.

Each decoder layer runs point cross-attention (every query attends into the
views that see it), then group point cross-attention (auxiliary points at
offsets predicted from the query add local context), then a feed-forward
block. The occupancy head maps final query content to per-class logits.

Queries are independent given the parameters, so the whole batch is
processed as flat arrays grouped by camera.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError
from .geometry import SceneBounds, hit_matrix, normalize_points, project_points


@dataclass
class DecoderConfig:
    d: int = 64
    heads: int = 4
    levels: int = 2
    num_layers: int = 3
    num_samples: int = 8  # sampling offsets per head per level
    group_size: int = 4
    ffn_hidden: int = 128
    head_hidden: int = 64
    num_classes: int = 6  # semantic classes; logits width is num_classes + 1
    average_members: bool = True
    feature_stride: int = 4  # rendering pixels per level-0 feature cell

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.num_layers < 1 or self.levels < 1 or self.num_samples < 1 or self.group_size < 1:
            raise ConfigError("layers, levels, samples and group size must be >= 1")

    @property
    def head_dim(self):
        return self.d // self.heads

    @property
    def num_freqs(self):
        # sin/cos pairs per axis; 6*F >= d so the encoder MLP sees at least d inputs
        return -(-self.d // 6)


@dataclass
class DecodeStats:
    exit_layer: np.ndarray  # [N] layer index at which each point's logits froze
    executed: int  # point-layer evaluations actually run
    total: int  # N * num_layers

    @property
    def relative_computation(self):
        return self.executed / self.total if self.total else 1.0


# ---------------------------------------------------------------------------
# parameters


def _seed_fn(seed):
    def fn(name):
        key = zlib.crc32(name.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))

    return fn


def _ring_bias(cfg: DecoderConfig) -> np.ndarray:
    """Spread the initial sampling offsets around each reference point."""
    theta = 2.0 * math.pi * np.arange(cfg.heads) / cfg.heads
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)  # (row, col)
    dirs = dirs / np.abs(dirs).max(axis=-1, keepdims=True)
    bias = np.zeros((cfg.heads, cfg.levels, cfg.num_samples, 2))
    reach = 4.0 / cfg.num_samples  # keep the ring within a few cells
    for s in range(cfg.num_samples):
        bias[:, :, s, :] = dirs[:, None, :] * (s + 1) * reach
    return bias.reshape(-1)


def _attention_params(prefix: str, cfg: DecoderConfig, seed_fn, params: dict):
    d = cfg.d
    n_off = cfg.heads * cfg.levels * cfg.num_samples * 2
    n_att = cfg.heads * cfg.levels * cfg.num_samples
    params[f"{prefix}.offset.weight"] = Tensor(np.zeros((d, n_off)), requires_grad=True)
    params[f"{prefix}.offset.bias"] = Tensor(_ring_bias(cfg), requires_grad=True)
    params[f"{prefix}.attn.weight"] = Tensor(np.zeros((d, n_att)), requires_grad=True)
    params[f"{prefix}.attn.bias"] = Tensor(np.zeros(n_att), requires_grad=True)
    params[f"{prefix}.value.weight"] = Tensor(
        dc.xavier_uniform(seed_fn(f"{prefix}.value.weight"), d, d), requires_grad=True
    )
    params[f"{prefix}.out.weight"] = Tensor(
        dc.xavier_uniform(seed_fn(f"{prefix}.out.weight"), d, d), requires_grad=True
    )
    params[f"{prefix}.out.bias"] = Tensor(np.zeros(d), requires_grad=True)


def _linear_params(prefix: str, fan_in: int, fan_out: int, seed_fn, params: dict, gain=1.0):
    params[f"{prefix}.weight"] = Tensor(
        dc.xavier_uniform(seed_fn(f"{prefix}.weight"), fan_in, fan_out, gain=gain),
        requires_grad=True,
    )
    params[f"{prefix}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _norm_params(prefix: str, d: int, params: dict):
    params[f"{prefix}.gain"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}.bias"] = Tensor(np.zeros(d), requires_grad=True)


def init_decoder_params(cfg: DecoderConfig, seed: int) -> dict:
    """All learnable decoder tensors under stable dotted names.

    Every tensor gets its own generator derived from (seed, name), so
    configurations sharing a tensor name initialize it identically.
    """
    seed_fn = _seed_fn(seed)
    params: dict = {}
    d = cfg.d
    _linear_params("posenc.fc1", 6 * cfg.num_freqs, d, seed_fn, params)
    _linear_params("posenc.fc2", d, d, seed_fn, params)
    for li in range(1, cfg.num_layers + 1):
        _attention_params(f"layer{li}.pca", cfg, seed_fn, params)
        _norm_params(f"layer{li}.norm1", d, params)
        _attention_params(f"layer{li}.gpca", cfg, seed_fn, params)
        # group offsets start near zero so group points begin at their parents
        _linear_params(f"layer{li}.gpca.group", d, 3 * cfg.group_size, seed_fn, params, gain=0.02)
        _norm_params(f"layer{li}.norm2", d, params)
        _linear_params(f"layer{li}.ffn.fc1", d, cfg.ffn_hidden, seed_fn, params)
        _linear_params(f"layer{li}.ffn.fc2", cfg.ffn_hidden, d, seed_fn, params)
        _norm_params(f"layer{li}.norm3", d, params)
    _linear_params("head.fc1", d, cfg.head_hidden, seed_fn, params)
    _linear_params("head.fc2", cfg.head_hidden, cfg.num_classes + 1, seed_fn, params)
    return params


# ---------------------------------------------------------------------------
# position encoder


def fourier_features(points_norm: np.ndarray, num_freqs: int) -> np.ndarray:
    """Interleaved sin/cos of each normalized coordinate at octave frequencies.

    Layout per axis: sin(pi v), cos(pi v), sin(2 pi v), cos(2 pi v), ...
    Inputs outside [0, 1] are legal (beyond-range queries) and simply land
    elsewhere on the circle.
    """
    p = np.atleast_2d(np.asarray(points_norm, dtype=np.float64))
    freqs = (2.0 ** np.arange(num_freqs)) * math.pi
    ang = p[:, :, None] * freqs[None, None, :]  # [N, 3, F]
    feats = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # [N, 3, F, 2]
    return feats.reshape(len(p), -1)


def position_encode(points_norm: np.ndarray, params: dict, cfg: DecoderConfig) -> Tensor:
    """Fourier features pushed through the two-layer MLP; one d-vector per point."""
    raw = Tensor(fourier_features(points_norm, cfg.num_freqs))
    h = dc.relu(dc.linear(raw, params["posenc.fc1.weight"], params["posenc.fc1.bias"]))
    return dc.linear(h, params["posenc.fc2.weight"], params["posenc.fc2.bias"])


# ---------------------------------------------------------------------------
# deformable attention plumbing


def pixel_to_feature(uv: np.ndarray, cfg: DecoderConfig) -> np.ndarray:
    """Original-image (u, v) pixels -> level-0 feature-map (row, col)."""
    s = cfg.feature_stride
    return np.stack([(uv[:, 1] - 0.5) / s, (uv[:, 0] - 0.5) / s], axis=1)


def _project_graph(pts: Tensor, cam, cfg: DecoderConfig) -> Tensor:
    """Differentiable ego -> level-0 feature (row, col) projection.

    Callers must pass only points with positive depth in `cam`.
    """
    pc = dc.linear(pts, Tensor(cam.R.T), Tensor(cam.t))
    uvz = dc.matmul(pc, Tensor(cam.K.T))
    z = dc.take(uvz, [2], axis=1)
    u = dc.take(uvz, [0], axis=1) / z
    v = dc.take(uvz, [1], axis=1) / z
    s = 1.0 / cfg.feature_stride
    return dc.concat([(v - 0.5) * s, (u - 0.5) * s], axis=1)


def prepare_value_maps(pyramids, value_weight: Tensor, cfg: DecoderConfig):
    """Per level, the head-projected value maps stacked as [n_cam*heads, H, W, dh].

    Projecting the maps once and sampling afterwards is exact: bilinear
    interpolation is linear in the map and the projection carries no bias.
    """
    n_cam = len(pyramids)
    out = []
    for lvl in range(cfg.levels):
        per_cam = []
        hh, ww = pyramids[0][lvl].data.shape[:2]
        for pyr in pyramids:
            fmap = pyr[lvl]
            proj = dc.matmul(dc.reshape(fmap, (hh * ww, cfg.d)), value_weight)
            m = dc.reshape(proj, (hh, ww, cfg.heads, cfg.head_dim))
            per_cam.append(dc.moveaxis(m, 2, 0))  # [heads, H, W, dh]
        stacked = dc.concat(per_cam, axis=0)  # [n_cam*heads, H, W, dh]
        out.append(stacked)
    return out


def _attend(inst_rc: Tensor, inst_cam: np.ndarray, offs: Tensor, attn: Tensor, vmaps, cfg):
    """Deformable sampling for a flat batch of (point, camera) instances.

    inst_rc [P,2]: level-0 reference (row, col); offs [P,h,L,Ns,2] in each
    level's own cell units; attn [P,h,L*Ns] softmaxed jointly per head.
    Returns the weighted sample sum, heads concatenated: [P, d].
    """
    p = len(inst_cam)
    h, lv, ns, dh = cfg.heads, cfg.levels, cfg.num_samples, cfg.head_dim
    base = dc.reshape(inst_rc, (p, 1, 1, 2))
    map_idx = (inst_cam[:, None] * h + np.arange(h)[None, :]).astype(np.int64)
    coords_list = []
    for lvl in range(lv):
        scale = 0.5**lvl
        # feature-cell alignment: each pooling halves and re-centers
        base_l = base * scale + (-0.5 * (1.0 - scale))
        off_l = dc.reshape(dc.take(offs, [lvl], axis=2), (p, h, ns, 2))
        coords_list.append(base_l + off_l)
    pooled = dc.deformable_pool(vmaps, map_idx, coords_list, attn)  # [P, h, dh]
    return dc.reshape(pooled, (p, h * dh))


def _predict_offsets(query: Tensor, prefix: str, params: dict, cfg: DecoderConfig):
    n = query.data.shape[0]
    offs = dc.linear(query, params[f"{prefix}.offset.weight"], params[f"{prefix}.offset.bias"])
    offs = dc.reshape(offs, (n, cfg.heads, cfg.levels, cfg.num_samples, 2))
    logits = dc.linear(query, params[f"{prefix}.attn.weight"], params[f"{prefix}.attn.bias"])
    attn = dc.softmax(dc.reshape(logits, (n, cfg.heads, cfg.levels * cfg.num_samples)))
    return offs, attn


def deformable_attention(
    query: Tensor, ref_rc: np.ndarray, pyramid, prefix: str, params: dict, cfg: DecoderConfig
) -> Tensor:
    """Single-camera deformable attention for [n, d] queries.

    `pyramid` is one camera's list of level maps; `ref_rc` gives level-0
    (row, col) reference locations. Offsets and per-head attention weights
    are predicted from the query; weights softmax jointly over all
    levels*samples of a head; sampled values are head-projected map reads.
    """
    offs, attn = _predict_offsets(query, prefix, params, cfg)
    vmaps = prepare_value_maps([pyramid], params[f"{prefix}.value.weight"], cfg)
    inst_cam = np.zeros(query.data.shape[0], dtype=np.int64)
    pooled = _attend(Tensor(np.atleast_2d(ref_rc)), inst_cam, offs, attn, vmaps, cfg)
    return dc.linear(pooled, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])


def _masked_update(content: Tensor, delta_sum: Tensor, counts: np.ndarray, gain, bias) -> Tensor:
    """Residual + layer norm where counts > 0; identity pass-through elsewhere."""
    mean = dc.mul(delta_sum, Tensor(1.0 / np.maximum(counts, 1)[:, None]))
    normed = dc.layer_norm(content + mean, gain, bias)
    mask = Tensor((counts > 0).astype(np.float64)[:, None])
    inv = Tensor((counts == 0).astype(np.float64)[:, None])
    return dc.mul(normed, mask) + dc.mul(content, inv)


def point_cross_attention(
    points: np.ndarray,
    content: Tensor,
    pos_embed: Tensor,
    rig,
    vmaps,
    prefix: str,
    params: dict,
    cfg: DecoderConfig,
    hits: np.ndarray | None = None,
) -> Tensor:
    """One PCA block: attend into every view that sees each point, then
    average over those views; zero-hit points pass through unchanged."""
    n = len(points)
    if hits is None:
        hits = hit_matrix(points, rig)
    query = content + pos_embed
    offs, attn = _predict_offsets(query, prefix, params, cfg)

    point_parts, cam_parts, rc_parts = [], [], []
    for c, cam in enumerate(rig):
        idx = np.nonzero(hits[:, c])[0]
        if len(idx) == 0:
            continue
        uv, _, _ = project_points(points[idx], cam)
        rc_parts.append(pixel_to_feature(uv, cfg))
        point_parts.append(idx)
        cam_parts.append(np.full(len(idx), c, dtype=np.int64))
    counts = hits.sum(axis=1)
    if not point_parts:
        return content
    point_idx = np.concatenate(point_parts)
    cam_idx = np.concatenate(cam_parts)
    rc = Tensor(np.concatenate(rc_parts, axis=0))

    pooled = _attend(rc, cam_idx, dc.take(offs, point_idx, 0), dc.take(attn, point_idx, 0), vmaps, cfg)
    da = dc.linear(pooled, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])
    sums = dc.scatter_add_rows(da, point_idx, n)
    return _masked_update(
        content, sums, counts, params[f"{prefix[: prefix.rfind('.')]}.norm1.gain"],
        params[f"{prefix[: prefix.rfind('.')]}.norm1.bias"],
    )


def group_point_cross_attention(
    points: np.ndarray,
    content: Tensor,
    pos_embed: Tensor,
    rig,
    vmaps,
    prefix: str,
    params: dict,
    cfg: DecoderConfig,
) -> Tensor:
    """One GPCA block: each query spawns `group_size` auxiliary points at
    predicted ego-space offsets; their view-averaged attention results are
    averaged over the group members that landed in some frustum."""
    n = len(points)
    g = cfg.group_size
    layer = prefix[: prefix.rfind(".")]
    goff = dc.linear(content, params[f"{prefix}.group.weight"], params[f"{prefix}.group.bias"])
    pg = dc.reshape(goff, (n * g, 3)) + Tensor(np.repeat(points, g, axis=0))
    hits_g = hit_matrix(pg.data, rig)

    query = content + pos_embed
    offs, attn = _predict_offsets(query, prefix, params, cfg)

    member_parts, cam_parts, rc_parts = [], [], []
    for c, cam in enumerate(rig):
        midx = np.nonzero(hits_g[:, c])[0]
        if len(midx) == 0:
            continue
        rc_parts.append(_project_graph(dc.take(pg, midx, 0), cam, cfg))
        member_parts.append(midx)
        cam_parts.append(np.full(len(midx), c, dtype=np.int64))
    view_counts = hits_g.sum(axis=1)
    hit_members = (view_counts.reshape(n, g) > 0).sum(axis=1)
    if not member_parts:
        return content
    member_idx = np.concatenate(member_parts)
    cam_idx = np.concatenate(cam_parts)
    rc = dc.concat(rc_parts, axis=0)
    parent_idx = member_idx // g

    pooled = _attend(rc, cam_idx, dc.take(offs, parent_idx, 0), dc.take(attn, parent_idx, 0), vmaps, cfg)
    da = dc.linear(pooled, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])
    member_sums = dc.scatter_add_rows(da, member_idx, n * g)
    member_mean = dc.mul(member_sums, Tensor(1.0 / np.maximum(view_counts, 1)[:, None]))
    per_parent = dc.tsum(dc.reshape(member_mean, (n, g, cfg.d)), axis=1)
    if cfg.average_members:
        return _masked_update(
            content, per_parent, hit_members, params[f"{layer}.norm2.gain"], params[f"{layer}.norm2.bias"]
        )
    # sum over members: fold the counts back in so _masked_update's mean cancels
    scaled = dc.mul(per_parent, Tensor(np.maximum(hit_members, 1).astype(np.float64)[:, None]))
    return _masked_update(
        content, scaled, hit_members, params[f"{layer}.norm2.gain"], params[f"{layer}.norm2.bias"]
    )


def _ffn(content: Tensor, layer: str, params: dict) -> Tensor:
    h = dc.relu(dc.linear(content, params[f"{layer}.ffn.fc1.weight"], params[f"{layer}.ffn.fc1.bias"]))
    out = dc.linear(h, params[f"{layer}.ffn.fc2.weight"], params[f"{layer}.ffn.fc2.bias"])
    return dc.layer_norm(content + out, params[f"{layer}.norm3.gain"], params[f"{layer}.norm3.bias"])


def occupancy_head(content: Tensor, params: dict) -> Tensor:
    """Two-layer MLP from query content to per-class logits (empty included)."""
    h = dc.relu(dc.linear(content, params["head.fc1.weight"], params["head.fc1.bias"]))
    return dc.linear(h, params["head.fc2.weight"], params["head.fc2.bias"])


# ---------------------------------------------------------------------------
# full decode


def decode(
    points: np.ndarray,
    rig,
    pyramids,
    params: dict,
    cfg: DecoderConfig,
    bounds: SceneBounds,
    mode: str = "full",
    threshold: float | None = None,
):
    """Run the decoder stack over a set of query points.

    mode "full": every point runs every layer; returns differentiable
    logits. mode "early_exit": after each non-final layer, points whose
    softmax confidence reaches `threshold` freeze their logits and drop
    out of later layers (inference only; returned logits are detached).

    Returns (logits [N, M+1], DecodeStats).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    if n == 0:
        raise ContractError("decode needs at least one query point")
    if mode not in ("full", "early_exit"):
        raise ConfigError(f"unknown decode mode {mode!r}")
    early = mode == "early_exit"
    if early and threshold is None:
        raise ConfigError("early_exit mode needs a threshold")

    pos_embed = position_encode(normalize_points(points, bounds), params, cfg)
    hits = hit_matrix(points, rig)
    content = Tensor(np.zeros((n, cfg.d)))

    active = np.arange(n)
    out_logits = np.zeros((n, cfg.num_classes + 1))
    exit_layer = np.full(n, cfg.num_layers, dtype=np.int64)
    executed = 0
    pts = points
    final_tensor = None

    for li in range(1, cfg.num_layers + 1):
        if len(active) == 0:
            break
        executed += len(active)
        layer = f"layer{li}"
        vm_pca = prepare_value_maps(pyramids, params[f"{layer}.pca.value.weight"], cfg)
        vm_gpca = prepare_value_maps(pyramids, params[f"{layer}.gpca.value.weight"], cfg)
        content = point_cross_attention(
            pts, content, pos_embed, rig, vm_pca, f"{layer}.pca", params, cfg, hits
        )
        content = group_point_cross_attention(
            pts, content, pos_embed, rig, vm_gpca, f"{layer}.gpca", params, cfg
        )
        content = _ffn(content, layer, params)

        if early and li < cfg.num_layers:
            logits_a = occupancy_head(content, params)
            conf = dc.softmax(logits_a).data.max(axis=1)
            freeze = conf >= threshold
            if freeze.any():
                rows = np.nonzero(freeze)[0]
                out_logits[active[rows]] = logits_a.data[rows]
                exit_layer[active[rows]] = li
                keep = np.nonzero(~freeze)[0]
                active = active[keep]
                content = dc.take(content, keep, 0)
                pos_embed = dc.take(pos_embed, keep, 0)
                pts = pts[keep]
                hits = hits[keep]

    if len(active):
        logits_a = occupancy_head(content, params)
        out_logits[active] = logits_a.data
        if not early and len(active) == n:
            final_tensor = logits_a

    stats = DecodeStats(exit_layer, executed, n * cfg.num_layers)
    if final_tensor is None:
        final_tensor = Tensor(out_logits)
    return final_tensor, stats
