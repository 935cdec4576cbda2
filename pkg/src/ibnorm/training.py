"""Training loop, evaluation, checkpointing and the information probe.

Reproducibility design: one root seed spawns separate streams for parameter
init, batch sampling and normalization noise, so changing the norm layer can
never shift the data stream. Metrics are appended to metrics.csv (fully
deterministic fields only); wall-clock timings go to a timings.csv sidecar.
Checkpoints are a JSON header line followed by raw little-endian f64 arrays
in header order, which round-trips bit-exactly.
"""

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__ as _version
from . import autodiff as ad
from .autodiff import Graph
from .data import (BatchDigest, CharLMData, ClassificationData,
                   TASK_CHAR_LM, TASK_CLASSIFICATION, fixed_lm_windows,
                   make_dataset, sample_classification_batch, sample_lm_batch)
from .errors import ConfigError, ContractError, NumericError
from .estimator import token_ib_value
from .models import (MLPModel, TinyTransformer, build_model, cross_entropy,
                     model_spec_from_dict, model_spec_to_dict)
from .optim import build_optimizer, clip_global_norm, lr_at

CHECKPOINT_FORMAT = "ibnorm-checkpoint-v1"


@dataclass
class TrainConfig:
    seed: int = 0
    optimizer: str = "adamw"
    learning_rate: float = 3e-3
    weight_decay: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    steps: int = 200
    warmup_steps: int = 20
    eval_interval: int = 50
    eval_batch_size: int = 64
    eval_max_batches: int = 4
    grad_clip: float = 1.0
    freeze_except_norm: bool = False
    data: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        if not (self.steps >= self.warmup_steps >= 0):
            raise ConfigError(
                f"need steps >= warmup_steps >= 0, got {self.steps}/{self.warmup_steps}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    def digest(self):
        """Fingerprint of the run-defining fields (artifact paths excluded)."""
        fields = {k: v for k, v in asdict(self).items() if k != "output_dir"}
        payload = json.dumps(fields, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class MetricRow:
    step: int
    train_loss: float
    eval_loss: float
    eval_metric: float
    metric_name: str
    wall_ms: float

    def csv_fields(self):
        return [self.step, repr(self.train_loss), repr(self.eval_loss),
                repr(self.eval_metric)]


@dataclass
class TrainResult:
    model: object
    metrics: list
    dataset: object
    batch_digest: str
    checkpoint_path: str | None
    metadata: dict


def _metric_name(task):
    return "eval_accuracy" if task == TASK_CLASSIFICATION else "eval_perplexity"


def _spawn_rngs(seed):
    init_ss, data_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(data_ss),
            np.random.default_rng(noise_ss))


def _sample_batch(dataset, batch_size, rng):
    if isinstance(dataset, ClassificationData):
        return sample_classification_batch(dataset, batch_size, rng)
    return sample_lm_batch(dataset.train_tokens, dataset.context, batch_size, rng)


def _forward_loss(model, x, y, train, rng):
    logits, reps = model.forward(x, train=train, rng=rng)
    return cross_entropy(logits, y), logits, reps


def evaluate(model, dataset, batch_size=64, max_batches=4):
    """Eval-mode loss plus accuracy (classification) or perplexity (LM)."""
    if isinstance(dataset, ClassificationData):
        total, correct, n = 0.0, 0, 0
        xs, ys = dataset.eval_x, dataset.eval_y
        for s in range(0, xs.shape[0], batch_size):
            xb, yb = xs[s:s + batch_size], ys[s:s + batch_size]
            if xb.shape[0] < 2:
                continue
            loss, logits, _ = _forward_loss(model, xb, yb, train=False, rng=None)
            total += float(loss.array) * xb.shape[0]
            correct += int((logits.array.argmax(axis=-1) == yb).sum())
            n += xb.shape[0]
        mean_loss = total / n
        return mean_loss, correct / n, _metric_name(TASK_CLASSIFICATION)
    if isinstance(dataset, CharLMData):
        # one deterministic set of evenly spaced windows, chunked into batches
        xb, yb = fixed_lm_windows(dataset.eval_tokens, dataset.context,
                                  batch_size * max_batches)
        losses = []
        for b in range(max_batches):
            sl = slice(b * batch_size, (b + 1) * batch_size)
            loss, _, _ = _forward_loss(model, xb[sl], yb[sl], train=False, rng=None)
            losses.append(float(loss.array))
        mean_loss = float(np.mean(losses))
        return mean_loss, float(np.exp(mean_loss)), _metric_name(TASK_CHAR_LM)
    raise ConfigError(f"cannot evaluate dataset of type {type(dataset)}")


def _dump_nan_diagnostics(out_dir, step, x, y, reps, loss_val):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, f"nan_diagnostic_step{step}.npz")
    arrays = {"x": np.asarray(x, dtype=np.float64), "y": np.asarray(y)}
    stats = {}
    for i, r in enumerate(reps):
        arrays[f"rep_{i}"] = r.array
        finite = np.isfinite(r.array)
        stats[f"rep_{i}"] = {
            "finite_fraction": float(finite.mean()),
            "max_abs_finite": float(np.abs(r.array[finite]).max()) if finite.any() else None,
        }
    np.savez(path, **arrays)
    with open(os.path.join(out_dir, f"nan_diagnostic_step{step}.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"step": step, "loss": repr(loss_val), "layer_stats": stats},
                  fh, indent=2)
    return path


def train(model_spec, cfg):
    """Run the full loop; returns the trained model, metrics and digests."""
    out_dir = cfg.output_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    init_rng, data_rng, noise_rng = _spawn_rngs(cfg.seed)
    dataset = make_dataset(model_spec.task, cfg.data, cfg.seed)
    model = build_model(model_spec, dataset, init_rng)
    if cfg.freeze_except_norm:
        model.freeze_except_norm()
    optimizer = build_optimizer(cfg.optimizer, cfg)

    metric_name = _metric_name(model_spec.task)
    metrics_path = timings_path = None
    metrics_fh = timings_fh = None
    if out_dir:
        metrics_path = os.path.join(out_dir, "metrics.csv")
        timings_path = os.path.join(out_dir, "timings.csv")
        metrics_fh = open(metrics_path, "w", encoding="utf-8", newline="")
        metrics_fh.write(f"step,train_loss,eval_loss,{metric_name}\n")
        timings_fh = open(timings_path, "w", encoding="utf-8", newline="")
        timings_fh.write("step,wall_ms\n")

    digest = BatchDigest()
    metrics = []
    named = model.parameters()
    t_start = time.perf_counter()
    try:
        for step in range(cfg.steps):
            x, y = _sample_batch(dataset, cfg.batch_size, data_rng)
            digest.update(x, y)
            with Graph() as graph:
                loss, _, reps = _forward_loss(model, x, y, train=True, rng=noise_rng)
            loss_val = float(loss.array)
            if not np.isfinite(loss_val):
                dump = _dump_nan_diagnostics(out_dir, step, x, y, reps, loss_val)
                raise NumericError(
                    f"non-finite loss {loss_val!r} at step {step}"
                    + (f" (diagnostics: {dump})" if dump else ""))
            grads = ad.backward(graph, loss)
            clip_global_norm(grads, cfg.grad_clip)
            optimizer.step(named, grads, lr_at(step, cfg.learning_rate,
                                               cfg.warmup_steps, cfg.steps))

            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
                eval_loss, metric, _ = evaluate(model, dataset,
                                                cfg.eval_batch_size,
                                                cfg.eval_max_batches)
                wall_ms = (time.perf_counter() - t_start) * 1e3
                row = MetricRow(step + 1, loss_val, eval_loss, metric,
                                metric_name, wall_ms)
                metrics.append(row)
                if metrics_fh:
                    metrics_fh.write(",".join(str(v) for v in row.csv_fields()) + "\n")
                    metrics_fh.flush()
                    timings_fh.write(f"{row.step},{row.wall_ms:.3f}\n")
                    timings_fh.flush()
    finally:
        if metrics_fh:
            metrics_fh.close()
            timings_fh.close()

    metadata = {
        "library_version": _version,
        "config": asdict(cfg),
        "config_digest": cfg.digest(),
        "model_spec": model_spec_to_dict(model_spec),
        "seed_streams": ["init", "data", "noise"],
        "batch_stream_sha256": digest.hexdigest(),
        "metric_name": metric_name,
        "lambda_hat_log": [layer.last_lambda_hat for layer in model.norm_layers],
    }
    checkpoint_path = None
    if out_dir:
        checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        save_checkpoint(checkpoint_path, model, model_spec, optimizer, cfg,
                        step=cfg.steps,
                        rng_states={"data": data_rng.bit_generator.state,
                                    "noise": noise_rng.bit_generator.state})
        with open(os.path.join(out_dir, "run_metadata.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    return TrainResult(model=model, metrics=metrics, dataset=dataset,
                       batch_digest=digest.hexdigest(),
                       checkpoint_path=checkpoint_path, metadata=metadata)


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------

def freeze_except_norm(model):
    """requires_grad stays True only on norm-layer affine parameters."""
    return model.freeze_except_norm()


def unfreeze_all(model):
    return model.unfreeze_all()


# ---------------------------------------------------------------------------
# checkpoint format: JSON header line + raw little-endian f64 arrays
# ---------------------------------------------------------------------------

def _model_dims(model):
    if isinstance(model, MLPModel):
        return {"input_dim": model.input_dim, "n_classes": model.n_classes}
    if isinstance(model, TinyTransformer):
        return {"vocab_size": model.vocab_size}
    raise ConfigError(f"cannot checkpoint model of type {type(model)}")


def save_checkpoint(path, model, model_spec, optimizer, cfg, step, rng_states):
    arrays = {}
    for name, p in model.parameters().items():
        arrays[name] = p.array
    arrays.update(model.state_arrays())
    arrays.update(optimizer.state_arrays())
    names = sorted(arrays)

    header = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "config_digest": cfg.digest(),
        "optimizer": {"name": cfg.optimizer, "t": getattr(optimizer, "t", step)},
        "model": {"spec": model_spec_to_dict(model_spec), "dims": _model_dims(model)},
        "data": {"task": model_spec.task, "params": cfg.data, "seed": cfg.seed},
        "rng": rng_states,
        "frozen": sorted(n for n, p in model.parameters().items()
                         if not p.requires_grad),
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Returns (model, model_spec, header); parameters restored bit-exactly."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a checkpoint file: {path}")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ConfigError(f"truncated checkpoint array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    model_spec = model_spec_from_dict(header["model"]["spec"])
    dims = header["model"]["dims"]
    rng = np.random.default_rng(0)  # placeholder init; weights overwritten below
    if model_spec.topology == "mlp":
        model = MLPModel(model_spec, dims["input_dim"], dims["n_classes"], rng)
    else:
        model = TinyTransformer(model_spec, dims["vocab_size"], rng)

    params = model.parameters()
    for name, p in params.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint missing parameter {name}")
        if arrays[name].shape != p.array.shape:
            raise ConfigError(f"shape mismatch for {name}")
        p.array[...] = arrays[name]
    state_keys = model.state_arrays().keys()
    if state_keys:
        model.load_state_arrays({k: arrays[k] for k in state_keys})
    for name in header.get("frozen", []):
        if name in params:
            params[name].requires_grad = False
    return model, model_spec, {"header": header, "arrays": arrays}


# ---------------------------------------------------------------------------
# information probe
# ---------------------------------------------------------------------------

def probe_ib(model, dataset, beta=1.0, sigma=1.0, n_timesteps=30,
             batch_size=64):
    """Layerwise IB estimates on a fixed held-out batch.

    Char LM: T_0 is the embedding output at each probed position, T_l the
    post-norm representations, Y the embedding row of the true next char;
    positions are evenly spaced (deterministic). Classification: a single
    timestep with T_0 = inputs and Y = one-hot labels.
    """
    if isinstance(dataset, ClassificationData):
        xb = dataset.eval_x[:batch_size]
        yb = dataset.eval_y[:batch_size]
        if xb.shape[0] < 2:
            raise ContractError("probe needs at least 2 eval instances")
        _, reps = model.forward(xb, train=False, rng=None)
        onehot = np.eye(dataset.n_classes)[yb]
        chain = [xb] + [r.array for r in reps]
        return token_ib_value([chain], [onehot], beta=beta, sigma=sigma)

    if isinstance(dataset, CharLMData):
        xb, yb = fixed_lm_windows(dataset.eval_tokens, dataset.context, batch_size)
        _, reps = model.forward(xb, train=False, rng=None)
        emb = model.embed(xb)
        t = xb.shape[1]
        positions = np.unique(np.linspace(0, t - 1, min(n_timesteps, t))
                              .astype(np.int64))
        tok_table = model.parameters()["tok_emb"].array
        reps_per_step, labels_per_step = [], []
        for p in positions:
            chain = [emb.array[:, p, :]] + [r.array[:, p, :] for r in reps]
            reps_per_step.append(chain)
            labels_per_step.append(tok_table[yb[:, p]])
        return token_ib_value(reps_per_step, labels_per_step, beta=beta, sigma=sigma)

    raise ConfigError(f"cannot probe dataset of type {type(dataset)}")
