"""Training objectives, AdamW with linear warmup/decay, the step loop, and
binary checkpointing.

Three objectives are combined by unweighted sum: an L2 penalty between real
and predicted contexts, a bag-of-words NLL over each utterance's tokens
from the predicted influence, and the autoregressive generation NLL.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EncodedDialogue, Vocab
from .model import ModelConfig, ForwardOutput, forward, init_params
from .tensor import Tensor


class TrainingDivergence(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending batch ids."""


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or wrong-version checkpoint files."""


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    warmup_steps: int = 100
    total_steps: int = 500
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    normalization: str = "per_token"  # "per_token" | "raw_sum"
    detach_cfm_target: bool = False
    use_cfm: bool = True
    use_sim: bool = True
    use_rgm: bool = True
    checkpoint_interval: int = 100

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    l_cfm: float
    l_sim: float
    l_rgm: float
    total: float
    context_count: int
    sim_token_count: int
    rgm_token_count: int
    loss: Tensor | None = None  # graph node for backward; omitted in logs

    def to_record(self) -> dict:
        return {
            "l_cfm": self.l_cfm,
            "l_sim": self.l_sim,
            "l_rgm": self.l_rgm,
            "total": self.total,
        }


# ---------------------------------------------------------------------------
# objectives (per-sample raw sums; normalization applied at batch level)


def cfm_terms(out: ForwardOutput, detach_target: bool = False) -> tuple[Tensor, int]:
    """Sum of squared L2 distances between real and predicted contexts."""
    n1 = out.contexts.shape[0]
    target = T.slice_rows(out.contexts, 1, n1)
    if detach_target:
        target = target.detach()
    diff = T.sub(target, out.contexts_pred)
    return T.tsum(T.mul(diff, diff)), n1 - 1


def sim_terms(out: ForwardOutput, encoded: EncodedDialogue) -> tuple[Tensor, int]:
    """Bag-of-words NLL over each utterance's content tokens (no stop marker)."""
    rows = []
    targets = []
    for k, (start, stop) in enumerate(encoded.utterance_spans):
        for p in range(start, stop - 1):  # stop-1 is the terminating [C]
            rows.append(k)
            targets.append(int(encoded.token_ids[p]))
    if not rows:
        return Tensor(np.zeros((), dtype=out.bow_logits.data.dtype)), 0
    logp = T.log_softmax(out.bow_logits, axis=-1)
    picked = T.gather_last(T.take_rows(logp, np.asarray(rows)), np.asarray(targets))
    return T.scale(T.tsum(picked), -1.0), len(rows)


def rgm_terms(out: ForwardOutput, encoded: EncodedDialogue) -> tuple[Tensor, int]:
    """Autoregressive NLL over all masked positions (utterance tokens + stop marker)."""
    positions = np.nonzero(encoded.loss_mask)[0]
    if positions.size == 0:
        return Tensor(np.zeros((), dtype=out.gen_logits.data.dtype)), 0
    logp = T.log_softmax(out.gen_logits, axis=-1)
    picked = T.gather_last(T.take_rows(logp, positions), encoded.token_ids[positions])
    return T.scale(T.tsum(picked), -1.0), int(positions.size)


def total_loss(
    samples: list[EncodedDialogue],
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Batch loss over whole dialogues; per-token or raw-sum normalization."""
    dtype = model_cfg.dtype
    cfm_sum = Tensor(np.zeros((), dtype=dtype))
    sim_sum = Tensor(np.zeros((), dtype=dtype))
    rgm_sum = Tensor(np.zeros((), dtype=dtype))
    n_ctx = n_sim = n_rgm = 0
    for enc in samples:
        out = forward(enc, params, model_cfg, train=train, rng=rng)
        if train_cfg.use_cfm:
            s, c = cfm_terms(out, train_cfg.detach_cfm_target)
            cfm_sum, n_ctx = T.add(cfm_sum, s), n_ctx + c
        if train_cfg.use_sim:
            s, c = sim_terms(out, enc)
            sim_sum, n_sim = T.add(sim_sum, s), n_sim + c
        if train_cfg.use_rgm:
            s, c = rgm_terms(out, enc)
            rgm_sum, n_rgm = T.add(rgm_sum, s), n_rgm + c

    if train_cfg.normalization == "per_token":
        l_cfm = T.scale(cfm_sum, 1.0 / max(n_ctx, 1))
        l_sim = T.scale(sim_sum, 1.0 / max(n_sim, 1))
        l_rgm = T.scale(rgm_sum, 1.0 / max(n_rgm, 1))
    elif train_cfg.normalization == "raw_sum":
        l_cfm, l_sim, l_rgm = cfm_sum, sim_sum, rgm_sum
    else:
        raise ValueError(f"unknown normalization mode {train_cfg.normalization!r}")

    loss = T.add(T.add(l_cfm, l_sim), l_rgm)
    return LossBreakdown(
        l_cfm=float(l_cfm.data),
        l_sim=float(l_sim.data),
        l_rgm=float(l_rgm.data),
        total=float(loss.data),
        context_count=n_ctx,
        sim_token_count=n_sim,
        rgm_token_count=n_rgm,
        loss=loss,
    )


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped_steps: int = 0


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= np.asarray(factor, dtype=p.grad.dtype)
    return norm


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    step: int,
    lr: float,
    cfg: TrainConfig,
) -> bool:
    """One decoupled-weight-decay Adam update; skips on non-finite gradients."""
    if step < 1:
        raise ValueError("step counts from 1")
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped_steps += 1
        return False
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        dt = p.data.dtype.type
        p.data -= dt(lr) * (mhat / (np.sqrt(vhat) + dt(cfg.eps))).astype(p.data.dtype)
        p.data -= dt(lr) * dt(cfg.weight_decay) * p.data
    return True


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at total_steps."""
    if step <= cfg.warmup_steps:
        return cfg.learning_rate * step / max(cfg.warmup_steps, 1)
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    return cfg.learning_rate * max(cfg.total_steps - step, 0) / span


# ---------------------------------------------------------------------------
# checkpoint format: "DFLW" | u32 version | JSON header | pad to 64 |
# little-endian float32 arrays in manifest order | u64 FNV-1a of the rest


CKPT_MAGIC = b"DFLW"
CKPT_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _align64(n: int) -> int:
    return (n + 63) & ~63


def save_checkpoint(
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    vocab: Vocab,
    path,
    extra: dict | None = None,
    opt_state: AdamWState | None = None,
) -> None:
    arrays = {name: p.data.astype("<f4") for name, p in params.items()}
    if opt_state is not None:
        for name in params:
            if name in opt_state.m:
                arrays[f"opt.m.{name}"] = opt_state.m[name].astype("<f4")
                arrays[f"opt.v.{name}"] = opt_state.v[name].astype("<f4")

    header = {
        "config": model_cfg.to_dict(),
        "vocab": vocab.id_to_token,
        "extra": extra or {},
        "manifest": [],
    }
    # offsets depend on header length; iterate to a fixed point
    names = list(arrays)
    for _ in range(10):
        hbytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
        off = _align64(8 + len(hbytes))
        manifest = []
        for name in names:
            manifest.append({"name": name, "shape": list(arrays[name].shape), "offset": off})
            off += arrays[name].nbytes
        if manifest == header["manifest"]:
            break
        header["manifest"] = manifest

    hbytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    blob += hbytes
    blob += b"\x00" * (_align64(len(blob)) - len(blob))
    for name in names:
        assert len(blob) == next(m["offset"] for m in header["manifest"] if m["name"] == name)
        blob += arrays[name].tobytes()
    blob += struct.pack("<Q", fnv1a64(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


def _json_header_end(buf: bytes, start: int) -> int:
    """Byte offset just past the JSON object beginning at start."""
    depth = 0
    in_str = False
    esc = False
    for i in range(start, len(buf)):
        b = buf[i]
        if in_str:
            if esc:
                esc = False
            elif b == 0x5C:  # backslash
                esc = True
            elif b == 0x22:  # quote
                in_str = False
        elif b == 0x22:
            in_str = True
        elif b == 0x7B:  # {
            depth += 1
        elif b == 0x7D:  # }
            depth -= 1
            if depth == 0:
                return i + 1
    raise CheckpointError("unterminated JSON header")


def load_checkpoint(path):
    """Returns (params, ModelConfig, Vocab, extra, AdamWState|None)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (stored_hash,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if fnv1a64(blob[:-8]) != stored_hash:
        raise CheckpointError(f"{path}: integrity hash mismatch (truncated or corrupt)")

    hend = _json_header_end(blob, 8)
    header = json.loads(blob[8:hend].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    from .data import RESERVED_TOKENS

    if header["vocab"][:5] != RESERVED_TOKENS:
        raise CheckpointError(f"{path}: vocab header lacks reserved tokens")
    vocab = Vocab.from_tokens(header["vocab"][5:])

    params: dict[str, Tensor] = {}
    opt = AdamWState()
    has_opt = False
    for entry in header["manifest"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        if name.startswith("opt.m."):
            opt.m[name[6:]] = arr
            has_opt = True
        elif name.startswith("opt.v."):
            opt.v[name[6:]] = arr
            has_opt = True
        else:
            params[name] = Tensor(arr.astype(cfg.dtype), requires_grad=True, name=name)
    return params, cfg, vocab, header.get("extra", {}), (opt if has_opt else None)


def checkpoint_hash(path) -> str:
    """Hex of the stored trailing integrity hash; used for provenance."""
    blob = Path(path).read_bytes()
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    return f"{stored:016x}"


# ---------------------------------------------------------------------------
# training loop


def _batch_indices(n: int, step: int, cfg: TrainConfig) -> np.ndarray:
    """Deterministic, stateless batch selection: resumable at any step."""
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    b = step - 1
    epoch, within = divmod(b, per_epoch)
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return perm[within * cfg.batch_size : (within + 1) * cfg.batch_size]


def train(
    samples: list[EncodedDialogue],
    vocab: Vocab,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir,
    val_samples: list[EncodedDialogue] | None = None,
    resume_from=None,
    log_cb=None,
) -> dict:
    """Run the step loop; writes metrics.jsonl and periodic checkpoints.

    Resuming from a checkpoint with the same seed continues bit-identically:
    batch order and dropout noise are pure functions of (seed, step).
    """
    if not samples:
        raise ValueError("empty training corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_step = 1
    opt_state = AdamWState()
    if resume_from is not None:
        params, model_cfg, vocab, extra, saved_opt = load_checkpoint(resume_from)
        if saved_opt is not None:
            opt_state = saved_opt
        opt_state.skipped_steps = int(extra.get("skipped_steps", 0))
        start_step = int(extra.get("step", 0)) + 1
    else:
        params = init_params(model_cfg, seed=train_cfg.seed)

    log_path = out_dir / "metrics.jsonl"
    log_fh = open(log_path, "a", encoding="utf-8")
    best_val = math.inf
    records = []

    def _save(path, step):
        save_checkpoint(
            params,
            model_cfg,
            vocab,
            path,
            extra={
                "step": step,
                "train_config": train_cfg.to_dict(),
                "skipped_steps": opt_state.skipped_steps,
            },
            opt_state=opt_state,
        )

    try:
        for step in range(start_step, train_cfg.total_steps + 1):
            idx = _batch_indices(len(samples), step, train_cfg)
            batch = [samples[i] for i in idx]
            rng = np.random.default_rng([train_cfg.seed, step])
            breakdown = total_loss(
                batch, params, model_cfg, train_cfg,
                train=model_cfg.dropout > 0, rng=rng,
            )
            if not math.isfinite(breakdown.total):
                raise TrainingDivergence(
                    f"non-finite loss at step {step}; batch token ids: "
                    + json.dumps([b.token_ids.tolist() for b in batch])
                )
            for p in params.values():
                p.grad = None
            T.backward(breakdown.loss)
            clip_global_norm(params, train_cfg.grad_clip)
            lr = lr_schedule(step, train_cfg)
            adamw_step(params, opt_state, step, lr, train_cfg)

            record = {"step": step, "lr": lr, **breakdown.to_record()}
            records.append(record)
            log_fh.write(json.dumps(record) + "\n")
            if log_cb:
                log_cb(record)

            at_interval = step % train_cfg.checkpoint_interval == 0
            if at_interval or step == train_cfg.total_steps:
                _save(out_dir / f"step{step:06d}.ckpt", step)
                if val_samples:
                    val = total_loss(val_samples, params, model_cfg, train_cfg, train=False)
                    if val.total < best_val:
                        best_val = val.total
                        _save(out_dir / "best.ckpt", step)
        _save(out_dir / "final.ckpt", train_cfg.total_steps)
    finally:
        log_fh.close()
    return {
        "params": params,
        "records": records,
        "final_checkpoint": str(out_dir / "final.ckpt"),
        "skipped_steps": opt_state.skipped_steps,
        "best_val": best_val,
    }
