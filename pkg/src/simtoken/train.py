"""AdamW training with cosine decay, JSON-lines logs, and binary checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, from_dict, to_dict
from .dataset import Corpus, batch_iter, load_dataset
from .model import SimToken
from .numerics import decode_tensor, encode_tensor
from .prompt import Vocab, build_vocab

CKPT_MAGIC = b"STKCKPT1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


class AdamW:
    """Adam moments with decoupled weight decay on matrices (vectors are not decayed)."""

    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(params):
            p = params[name]
            if p.ndim > 1 and self.wd:
                p -= lr * self.wd * p
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# checkpoints

def save_checkpoint(path, params: dict, run: RunConfig, vocab: Vocab, step: int) -> None:
    names = sorted(params)
    header = json.dumps({"config": to_dict(run), "vocab_hash": vocab.digest(), "step": step,
                         "names": names}, sort_keys=True).encode()
    blobs = b"".join(encode_tensor(params[n], precision=64) for n in names)
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(header)) + header + blobs)


def load_checkpoint(path) -> tuple[dict, RunConfig, str, int]:
    """Return ``(params, run_config, vocab_hash, step)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + n])
    pos = 12 + n
    params = {}
    for name in header["names"]:
        params[name], pos = decode_tensor(buf, pos, source=f"{path}:{name}")
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return params, from_dict(RunConfig, header["config"]), header["vocab_hash"], header["step"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# training loop

@dataclass
class TrainResult:
    params: dict
    model: SimToken
    vocab: Vocab
    log: list[dict]
    checkpoint: Path | None


def train(run: RunConfig, corpus: Corpus | None = None, out_dir=None, progress=None) -> TrainResult:
    run.validate()
    corpus = corpus if corpus is not None else load_dataset(run.dataset)
    vocab = build_vocab(corpus)
    size = corpus.manifest.config.size
    model = SimToken(run.model, vocab, size, run.ablation)
    params = model.init_params(run.seed)
    opt = AdamW(params, run.lr, run.beta1, run.beta2, run.adam_eps, run.weight_decay)
    lam = run.effective_lambda
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.json")
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")
    samples = {rec.expression_id: model.prepare(corpus, rec) for rec in corpus.split("train")}
    batches_per_epoch = sum(1 for _ in batch_iter(corpus, "train", run.batch_size, run.seed, 0))
    total_steps = run.epochs * batches_per_epoch
    log, step, t0 = [], 0, time.perf_counter()
    ckpt = None
    try:
        for epoch in range(run.epochs):
            for batch in batch_iter(corpus, "train", run.batch_size, run.seed, epoch):
                g, scope, total, bd, _ = model.batch_loss(params, [samples[r.expression_id] for r in batch],
                                                          lam, run.tau, run.sa_cosine)
                if not math.isfinite(bd.total):
                    raise TrainingError(f"non-finite loss at step {step}: {bd.to_dict()}")
                grads = scope.grads(g.backward(total))
                gnorm = math.sqrt(sum(float((v * v).sum()) for v in grads.values()))
                lr = cosine_lr(run.lr, step, total_steps)
                rec = {"step": step, "epoch": epoch, **bd.to_dict(), "lr": lr, "grad_norm": gnorm}
                log.append(rec)
                if out is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                opt.step(params, grads, lr)
                step += 1
                if progress is not None:
                    # wall time goes to the callback only, keeping the log reproducible
                    progress({**rec, "wall_time": time.perf_counter() - t0})
            if out is not None:
                ckpt = out / f"checkpoint_epoch{epoch + 1}.stk"
                save_checkpoint(ckpt, params, run, vocab, step)
    finally:
        if out is not None:
            log_fh.close()
    if out is not None:
        ckpt = out / "checkpoint.stk"
        save_checkpoint(ckpt, params, run, vocab, step)
    return TrainResult(params, model, vocab, log, ckpt)
