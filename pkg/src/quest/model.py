"""Tracking network: patch encoder, persistent queries, global
cross-attention decoder, coordinate/confidence head, and the stage-2
scene-flow head.

The K query embeddings are one parameter set shared by every frame and
every window: the decoder conditions on time only through a frame-index
positional encoding on the cross-attention score path, so queries act as
appearance anchors rather than per-frame tracklets. Decoder memory is the
full spatiotemporal token set of the window (global attention).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import Camera

PERSISTENT = "persistent"
PER_FRAME = "per_frame"  # the "no queries" ablation: redrawn every frame


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Desk-scale defaults; paper_preset()
    restores the full-scale 224/16 configuration."""

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    n_queries: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    decoder_heads: int = 4
    window: int = 4
    head_hidden: int = 64
    flow_hidden: int = 64
    mlp_ratio: int = 2
    activation: str = "gelu"     # or "relu"
    head_mode: str = "sigmoid"   # or "linear" (see objectives.l_bound)
    query_mode: str = PERSISTENT

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ModelError("image_size must be divisible by patch_size")
        if self.embed_dim % self.decoder_heads != 0:
            raise ModelError("embed_dim must be divisible by decoder_heads")
        if self.activation not in ("gelu", "relu"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.head_mode not in ("sigmoid", "linear"):
            raise ModelError(f"unknown head_mode {self.head_mode!r}")
        if self.query_mode not in (PERSISTENT, PER_FRAME):
            raise ModelError(f"unknown query_mode {self.query_mode!r}")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @classmethod
    def paper_preset(cls) -> "ModelConfig":
        return cls(image_size=224, patch_size=16, embed_dim=384, n_queries=8,
                   encoder_layers=2, decoder_layers=2, decoder_heads=4,
                   window=4, head_hidden=384, flow_hidden=384)


@dataclass
class ModelOutput:
    """One window forward pass."""

    refined: ad.Tensor            # (T, K, D)
    points2d: ad.Tensor           # (T, K, 2)
    conf: ad.Tensor               # (T, K)
    logits: ad.Tensor             # (T, K, 3) pre-squash head outputs
    points3d: ad.Tensor | None    # (T, K, 3) lifted, None without depth
    valid3d: np.ndarray | None    # (T, K) bool, sampled depth > 0
    flow: ad.Tensor | None        # (T-1, K, 3) stage-2 only
    params: dict = field(default_factory=dict)


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, bad.sum())
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E57]))
    d, n, t = cfg.embed_dim, cfg.n_tokens, cfg.window
    p: dict[str, np.ndarray] = {}
    p["patch.w"] = _trunc_normal(rng, (cfg.patch_dim, d))
    p["patch.b"] = np.zeros(d)
    p["pos_spatial"] = _trunc_normal(rng, (n, d))
    p["pos_temporal"] = _trunc_normal(rng, (t, d))
    p["queries"] = _trunc_normal(rng, (cfg.n_queries, d))

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{w}"] = _trunc_normal(rng, (d, d))
        for b in ("bq", "bk", "bv", "bo"):
            p[f"{prefix}.{b}"] = np.zeros(d)

    def norm(prefix):
        p[f"{prefix}.g"] = np.ones(d)
        p[f"{prefix}.b"] = np.zeros(d)

    def mlp(prefix, d_in, d_hidden, d_out, final_bias=None):
        p[f"{prefix}.w1"] = _trunc_normal(rng, (d_in, d_hidden))
        p[f"{prefix}.b1"] = np.zeros(d_hidden)
        p[f"{prefix}.w2"] = _trunc_normal(rng, (d_hidden, d_out))
        p[f"{prefix}.b2"] = np.zeros(d_out) if final_bias is None else final_bias

    for i in range(cfg.encoder_layers):
        norm(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        mlp(f"enc{i}.mlp", d, cfg.mlp_ratio * d, d)
    for i in range(cfg.decoder_layers):
        norm(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        mlp(f"dec{i}.mlp", d, cfg.mlp_ratio * d, d)
    # coordinate logits start at the sigmoid center; the confidence branch
    # is separate (shared across queries/frames like the coordinate head)
    # so its dense early gradient cannot crowd out localization
    mlp("head", d, cfg.head_hidden, 2)
    mlp("conf", d, cfg.head_hidden, 1, final_bias=np.array([1.0]))  # optimistic
    mlp("flow", 2 * d, cfg.flow_hidden, 3)
    return p


FLOW_PREFIX = "flow."


def is_backbone(name: str) -> bool:
    return not name.startswith(FLOW_PREFIX)


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(T, C, H, W) -> (T, N, C*patch*patch), row-major patch order."""
    t, c, h, w = frames.shape
    hp, wp = h // patch, w // patch
    x = frames.reshape(t, c, hp, patch, wp, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(t, hp * wp, c * patch * patch))


class QueSTModel:
    """Parameter store plus the forward pass over one temporal window."""

    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def parameter_count(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    def stage(self, tape: ad.Tape | None, trainable) -> dict[str, ad.Tensor]:
        """Wrap parameters as tape leaves (trainable) or constants."""
        out = {}
        for name, arr in self.params.items():
            if tape is not None and trainable(name):
                out[name] = tape.leaf(arr)
            else:
                out[name] = ad.Tensor(arr)
        return out

    # -- building blocks ----------------------------------------------------

    def _act(self, x):
        return ad.gelu(x) if self.cfg.activation == "gelu" else ad.relu(x)

    def _split_heads(self, x, heads):
        # (..., L, D) -> (..., h, L, dh)
        lead = x.shape[:-2]
        length, d = x.shape[-2], x.shape[-1]
        x = ad.reshape(x, lead + (length, heads, d // heads))
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.transpose(x, order)

    def _merge_heads(self, x):
        # (..., h, L, dh) -> (..., L, D)
        lead = x.shape[:-3]
        h, length, dh = x.shape[-3:]
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.reshape(ad.transpose(x, order), lead + (length, h * dh))

    def _mha(self, p, prefix, q_in, k_in, v_in):
        heads = self.cfg.decoder_heads
        q = ad.add(ad.matmul(q_in, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = ad.add(ad.matmul(k_in, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = ad.add(ad.matmul(v_in, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        out = ad.attention(self._split_heads(q, heads), self._split_heads(k, heads),
                           self._split_heads(v, heads))
        return ad.add(ad.matmul(self._merge_heads(out), p[f"{prefix}.wo"]),
                      p[f"{prefix}.bo"])

    def _mlp(self, p, prefix, x):
        h = self._act(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, p, prefix, x):
        return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    # -- forward ------------------------------------------------------------

    def encode(self, p, frames: np.ndarray) -> ad.Tensor:
        """Frames (T, C, H, W) -> feature tokens (T, N, D).

        Per-patch linear projection plus learnable spatial (shared across
        frames) and temporal (shared across patches) encodings, then
        within-frame self-attention blocks.
        """
        cfg = self.cfg
        t = frames.shape[0]
        if frames.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ModelError(f"bad frame shape {frames.shape}")
        if t > cfg.window:
            raise ModelError(f"window of {t} frames exceeds configured {cfg.window}")
        tokens = ad.Tensor(patchify(frames, cfg.patch_size))
        x = ad.add(ad.matmul(tokens, p["patch.w"]), p["patch.b"])
        x = ad.add(x, ad.reshape(p["pos_spatial"], (1, cfg.n_tokens, cfg.embed_dim)))
        tpe = p["pos_temporal"] if t == cfg.window else p["pos_temporal"][:t]
        x = ad.add(x, ad.reshape(tpe, (t, 1, cfg.embed_dim)))
        for i in range(cfg.encoder_layers):
            h = self._ln(p, f"enc{i}.ln1", x)
            x = ad.add(x, self._mha(p, f"enc{i}.attn", h, h, h))
            h = self._ln(p, f"enc{i}.ln2", x)
            x = ad.add(x, self._mlp(p, f"enc{i}.mlp", h))
        return x

    def decode(self, p, feats: ad.Tensor, query_noise: np.ndarray | None = None):
        """Refine queries against the full window token set.

        Every decoder layer runs query self-attention (within a frame),
        cross-attention from the frame-conditioned queries over all T*N
        tokens jointly, and an MLP. Returns (refined, points2d, conf,
        logits); coordinates/confidence are squashed per cfg.head_mode.
        """
        cfg = self.cfg
        t, n, d = feats.shape
        memory = ad.reshape(feats, (t * n, d))
        if cfg.query_mode == PER_FRAME:
            if query_noise is None:
                raise ModelError("per-frame query mode needs query_noise (T,K,D)")
            x = ad.Tensor(query_noise)
        else:
            x = ad.add(ad.reshape(p["queries"], (1, cfg.n_queries, d)),
                       np.zeros((t, 1, 1)))
        tpe = p["pos_temporal"] if t == cfg.window else p["pos_temporal"][:t]
        tpe = ad.reshape(tpe, (t, 1, d))
        for i in range(cfg.decoder_layers):
            h = self._ln(p, f"dec{i}.ln1", x)
            x = ad.add(x, self._mha(p, f"dec{i}.self", h, h, h))
            h = self._ln(p, f"dec{i}.ln2", x)
            # frame index enters on the score path only, so constant memory
            # tokens yield frame-independent readouts
            x = ad.add(x, self._mha(p, f"dec{i}.cross", ad.add(h, tpe), memory, memory))
            h = self._ln(p, f"dec{i}.ln3", x)
            x = ad.add(x, self._mlp(p, f"dec{i}.mlp", h))
        coord_logits = self._mlp(p, "head", x)
        conf_logits = self._mlp(p, "conf", x)
        logits = ad.concat([coord_logits, conf_logits], axis=-1)
        if cfg.head_mode == "sigmoid":
            points2d = ad.sigmoid(coord_logits)
        else:
            points2d = coord_logits
        conf = ad.sigmoid(conf_logits[..., 0])
        return x, points2d, conf, logits

    def lift(self, points2d: ad.Tensor, depth_maps: np.ndarray, cam: Camera):
        """Bilinear depth sample at each 2D point, backprojected to world.

        Gradients flow to points2d both through the pinhole inverse and
        through the bilinear weights; the depth values themselves are
        constants. Entries with sampled depth <= 0 are flagged invalid.
        """
        return _lift_op(points2d, depth_maps, cam)

    def flow_head(self, p, refined: ad.Tensor) -> ad.Tensor:
        """3D displacement per query from consecutive refined embeddings."""
        pair = ad.concat([refined[:-1], refined[1:]], axis=-1)
        return self._mlp(p, "flow", pair)

    def forward(self, frames: np.ndarray, depth: np.ndarray | None, cam: Camera | None,
                tape: ad.Tape | None = None, stage: int = 1,
                query_noise: np.ndarray | None = None) -> ModelOutput:
        """Run one window. stage=2 freezes the backbone: its parameters are
        staged as constants so their gradients are exactly zero."""
        if stage == 1:
            p = self.stage(tape, lambda name: is_backbone(name))
        elif stage == 2:
            p = self.stage(tape, lambda name: not is_backbone(name))
        else:
            raise ModelError(f"stage must be 1 or 2, got {stage}")
        feats = self.encode(p, frames)
        refined, points2d, conf, logits = self.decode(p, feats, query_noise)
        points3d = valid3d = None
        if depth is not None:
            points3d, valid3d = self.lift(points2d, depth, cam)
        flow = self.flow_head(p, refined) if stage == 2 else None
        return ModelOutput(refined=refined, points2d=points2d, conf=conf,
                           logits=logits, points3d=points3d, valid3d=valid3d,
                           flow=flow, params=p)


def _lift_op(points2d: ad.Tensor, depth_maps: np.ndarray, cam: Camera):
    uv = points2d.data
    t, k, _ = uv.shape
    h, w = depth_maps.shape[1:]
    gx = uv[..., 0] * w - 0.5
    gy = uv[..., 1] * h - 0.5
    x0 = np.clip(np.floor(gx), 0, w - 2).astype(int)
    y0 = np.clip(np.floor(gy), 0, h - 2).astype(int)
    wx_raw = gx - x0
    wy_raw = gy - y0
    inside_x = ((wx_raw >= 0) & (wx_raw <= 1)).astype(np.float64)
    inside_y = ((wy_raw >= 0) & (wy_raw <= 1)).astype(np.float64)
    wx = np.clip(wx_raw, 0.0, 1.0)
    wy = np.clip(wy_raw, 0.0, 1.0)

    t_idx = np.arange(t)[:, None]
    d00 = depth_maps[t_idx, y0, x0]
    d01 = depth_maps[t_idx, y0, x0 + 1]
    d10 = depth_maps[t_idx, y0 + 1, x0]
    d11 = depth_maps[t_idx, y0 + 1, x0 + 1]
    z = (d00 * (1 - wy) * (1 - wx) + d01 * (1 - wy) * wx
         + d10 * wy * (1 - wx) + d11 * wy * wx)
    valid = z > 0

    px = uv[..., 0] * w
    py = uv[..., 1] * h
    xc = (px - cam.cx) * z / cam.fx
    yc = (py - cam.cy) * z / cam.fy
    pc = np.stack([xc, yc, z], axis=-1)
    world = (pc - cam.trans) @ cam.rot

    # bilinear depth derivative w.r.t. the continuous pixel coordinate
    dz_dgx = ((1 - wy) * (d01 - d00) + wy * (d11 - d10)) * inside_x
    dz_dgy = ((1 - wx) * (d10 - d00) + wx * (d11 - d01)) * inside_y
    dz_du = dz_dgx * w
    dz_dv = dz_dgy * h

    dxc_du = (w * z + (px - cam.cx) * dz_du) / cam.fx
    dyc_du = (py - cam.cy) * dz_du / cam.fy
    dpc_du = np.stack([dxc_du, dyc_du, dz_du], axis=-1)
    dxc_dv = (px - cam.cx) * dz_dv / cam.fx
    dyc_dv = (h * z + (py - cam.cy) * dz_dv) / cam.fy
    dpc_dv = np.stack([dxc_dv, dyc_dv, dz_dv], axis=-1)
    dworld_du = dpc_du @ cam.rot
    dworld_dv = dpc_dv @ cam.rot

    def grad_fn(g):
        gu = np.sum(g * dworld_du, axis=-1)
        gv = np.sum(g * dworld_dv, axis=-1)
        return [np.stack([gu, gv], axis=-1)]

    return ad.apply_op([points2d], world, grad_fn), valid


# ---------------------------------------------------------------------------
# checkpoint format: magic "QSTW", version, config block, named parameter
# table, trailing CRC32


CKPT_MAGIC = b"QSTW"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(model: QueSTModel, path) -> None:
    cfg_text = "\n".join(
        f"{f.name}={getattr(model.cfg, f.name)}" for f in fields(ModelConfig)
    ).encode("utf-8")
    body = bytearray()
    body += CKPT_MAGIC
    body += struct.pack("<I", CKPT_VERSION)
    body += struct.pack("<I", len(cfg_text)) + cfg_text
    body += struct.pack("<I", len(model.params))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype=np.float64)
        raw = name.encode("ascii")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> QueSTModel:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a QSTW checkpoint")
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored:
        raise CheckpointError("checkpoint CRC32 mismatch")
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    cfg_kv = dict(line.split("=", 1)
                  for line in blob[pos:pos + cfg_len].decode("utf-8").splitlines())
    pos += cfg_len
    kwargs = {}
    for f in fields(ModelConfig):
        raw = cfg_kv[f.name]
        kwargs[f.name] = int(raw) if f.type == "int" else raw
    cfg = ModelConfig(**kwargs)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("ascii")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos
                                     ).reshape(shape).copy()
        pos += 8 * n
    return QueSTModel(cfg, params=params)
