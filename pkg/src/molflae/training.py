"""Training objective, optimisation loop, config files and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as archive
from .bfn import (
    NetworkOutput,
    NoiseSchedule,
    center_latent,
    flow_sample_continuous,
    flow_sample_discrete,
    loss_v_n,
    loss_x_n,
)
from .encoder import LatentCode, kl_loss, sample_latent
from .model import MolBatch, MolFLAE, build_model, collate, schedule_from
from .moldata import AtomCountPrior, AtomVocabulary, Molecule, fit_atom_count_prior

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    recon_weight: float = 1.0
    reg_weight: float = 0.1
    var_x: float = 100.0
    var_h: float = 1.0
    n_latent: int = 10
    latent_dim: int = 32
    hidden: int = 128
    layers: int = 9
    heads: int = 16
    k: int = 32
    attention: bool = True
    adam_beta1: float = 0.95
    adam_beta2: float = 0.99
    lr: float = 0.005
    weight_decay: float = 0.0
    lr_factor: float = 0.6
    lr_patience: int = 10
    min_lr: float = 1e-6
    grad_clip: float = 8.0
    batch_size: int = 400
    max_steps: int = 1000
    val_size: int = 0
    eval_every: int = 0
    n_steps: int = 1000
    sigma1: float = 0.001
    beta1: float = 1.0
    vocab: str = "qm9"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.recon_weight < 0 or self.reg_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for name in ("n_latent", "latent_dim", "hidden", "heads", "k", "batch_size", "n_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(value, types[key])
    return dataclasses.replace(base or TrainConfig(), **values)


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    vals = {}
    for k, v in overrides.items():
        if k not in types:
            raise ValueError(f"unknown config key {k!r}")
        vals[k] = _coerce(str(v), types[k])
    return dataclasses.replace(cfg, **vals)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(TrainConfig))


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


# --------------------------------------------------------------------------- loss


@dataclass
class LossTerms:
    total: torch.Tensor
    recon_x: torch.Tensor
    recon_v: torch.Tensor
    reg: torch.Tensor

    def mean(self) -> "LossTerms":
        return LossTerms(*(v.mean() for v in (self.total, self.recon_x, self.recon_v, self.reg)))


NetworkFn = Callable[[torch.Tensor, torch.Tensor, LatentCode, torch.Tensor, torch.Tensor], NetworkOutput]


def recon_losses(network: NetworkFn, x, onehot, mask, z: LatentCode, schedule: NoiseSchedule, generator=None):
    """Discrete-time BFN reconstruction losses, one time step per molecule.

    ``x`` must already be expressed in the frame of the centred latent ``z``.
    Returns per-molecule ``(L_x, L_v)``.
    """
    b = x.shape[0]
    n = schedule.n_steps
    i = torch.randint(1, n + 1, (b,), generator=generator)
    t = ((i - 1) / n).to(x.dtype)
    # padded rows get a dummy one-hot so the senders stay well defined
    e_v = onehot.clone()
    e_v[~mask] = 0.0
    e_v[..., 0] = e_v[..., 0] + (~mask).to(x.dtype)

    mu, _ = flow_sample_continuous(x, t, schedule, generator)
    mu = mu * mask[..., None].to(x.dtype)
    theta = flow_sample_discrete(e_v, t, schedule, generator)
    out = network(mu, theta, z, t, mask)

    alpha = schedule.alpha(i.to(x.dtype))
    alpha_v = schedule.alpha_v(i.to(x.dtype))
    lx = loss_x_n(x, out.x_hat, alpha, mask)
    lv = loss_v_n(e_v, torch.softmax(out.v_logits, dim=-1), alpha_v, generator, mask)
    return lx, lv


def batch_loss(model: MolFLAE, batch: MolBatch, cfg: TrainConfig, generator=None, network: NetworkFn | None = None) -> LossTerms:
    """Per-molecule loss terms for one batch (encode, sample latent, BFN losses)."""
    post = model.encode(batch)
    reg = kl_loss(post, cfg.var_x, cfg.var_h, reduce=False)
    z = sample_latent(post, generator)
    zc, offset = center_latent(z)
    x_lat = (batch.x - offset) * batch.mask[..., None].to(batch.x.dtype)
    lx, lv = recon_losses(network or model.decoder, x_lat, batch.onehot, batch.mask, zc, schedule_from(cfg), generator)
    total = cfg.recon_weight * (lx + lv) + cfg.reg_weight * reg
    return LossTerms(total, lx, lv, reg)


def forward_loss(mol: Molecule, model: MolFLAE, cfg: TrainConfig, generator=None) -> LossTerms:
    batch = collate([mol], model.num_types, model.dtype)
    terms = batch_loss(model, batch, cfg, generator)
    return LossTerms(*(v[0] for v in (terms.total, terms.recon_x, terms.recon_v, terms.reg)))


# --------------------------------------------------------------------------- checkpoints


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, last_good: "Checkpoint | None"):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: AtomVocabulary
    prior: AtomCountPrior
    model_state: dict[str, torch.Tensor]
    optim_state: dict | None = None
    sched_state: dict | None = None
    rng_state: torch.Tensor | None = None
    step: int = 0
    epoch: int = 0
    history: list[float] = field(default_factory=list)

    def build_model(self) -> MolFLAE:
        model = build_model(self.vocab, self.config).to(self.config.torch_dtype)
        state = {k: v.to(self.config.torch_dtype) if v.is_floating_point() else v for k, v in self.model_state.items()}
        model.load_state_dict(state)
        model.eval()
        return model


def _optim_to_archive(state: dict, tensors: dict) -> dict:
    per_param = {}
    for idx, st in state["state"].items():
        keys = {}
        for key, val in st.items():
            if torch.is_tensor(val):
                name = f"optim/{idx}/{key}"
                tensors[name] = val
                keys[key] = {"tensor": name, "dtype": str(val.dtype).replace("torch.", "")}
            else:
                keys[key] = {"value": val}
        per_param[str(idx)] = keys
    return {"state": per_param, "param_groups": state["param_groups"]}


def _optim_from_archive(meta: dict, tensors: dict) -> dict:
    state = {}
    for idx, keys in meta["state"].items():
        st = {}
        for key, spec in keys.items():
            if "tensor" in spec:
                st[key] = tensors[spec["tensor"]].to(getattr(torch, spec["dtype"]))
            else:
                st[key] = spec["value"]
        state[int(idx)] = st
    return {"state": state, "param_groups": meta["param_groups"]}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"float": repr(obj)}
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if set(obj) == {"float"}:
            return float(obj["float"])
        return {k: _unjson(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unjson(v) for v in obj]
    return obj


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    tensors = {f"model/{k}": v for k, v in ck.model_state.items()}
    meta = {
        "format": "molflae-checkpoint",
        "config": dataclasses.asdict(ck.config),
        "vocab": ck.vocab.to_dict(),
        "prior": ck.prior.to_dict(),
        "step": ck.step,
        "epoch": ck.epoch,
        "history": ck.history,
    }
    if ck.optim_state is not None:
        meta["optim"] = _jsonable(_optim_to_archive(ck.optim_state, tensors))
    if ck.sched_state is not None:
        meta["sched"] = _jsonable(ck.sched_state)
    if ck.rng_state is not None:
        tensors["rng/torch"] = ck.rng_state
    return archive.dumps(tensors, meta)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    tensors, meta = archive.loads(data)
    model_state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    optim = _optim_from_archive(_unjson(meta["optim"]), tensors) if "optim" in meta else None
    return Checkpoint(
        config=TrainConfig(**meta["config"]),
        vocab=AtomVocabulary.from_dict(meta["vocab"]),
        prior=AtomCountPrior.from_dict(meta["prior"]),
        model_state=model_state,
        optim_state=optim,
        sched_state=_unjson(meta["sched"]) if "sched" in meta else None,
        rng_state=tensors.get("rng/torch"),
        step=meta["step"],
        epoch=meta["epoch"],
        history=list(meta["history"]),
    )


def save_checkpoint(path, ck: Checkpoint) -> bytes:
    data = checkpoint_to_bytes(ck)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- loop


def split_dataset(dataset: Sequence[Molecule], val_size: int, seed: int):
    if val_size <= 0:
        return list(dataset), list(dataset)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    val = [dataset[i] for i in perm[:val_size]]
    train = [dataset[i] for i in perm[val_size:]]
    if not train:
        raise ValueError("validation split leaves no training data")
    return train, val


@torch.no_grad()
def evaluate(model: MolFLAE, mols: Sequence[Molecule], cfg: TrainConfig, seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    totals = []
    for start in range(0, len(mols), cfg.batch_size):
        batch = collate(mols[start : start + cfg.batch_size], model.num_types, model.dtype)
        totals.append(batch_loss(model, batch, cfg, gen).total)
    return float(torch.cat(totals).mean())


def _make_optim(model, cfg):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), weight_decay=cfg.weight_decay)
    # torch decays once the bad-validation count exceeds its patience; shift by one so
    # the decay lands on the lr_patience-th non-improving validation
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.lr_factor, patience=max(cfg.lr_patience - 1, 0), min_lr=cfg.min_lr
    )
    return opt, sched


def train(
    dataset: Sequence[Molecule],
    cfg: TrainConfig,
    vocab: AtomVocabulary,
    resume: Checkpoint | None = None,
    checkpoint_path=None,
    max_steps: int | None = None,
    callback=None,
) -> Checkpoint:
    """Mini-batch training with plateau LR decay on the validation loss.

    One epoch is one pass over the shuffled training split.  Validation runs
    every ``eval_every`` steps (every epoch when 0) and is followed by a
    checkpoint.  ``max_steps`` (default ``cfg.max_steps``) is the absolute
    step count to stop at, so a resumed run continues where it left off.
    """
    if not dataset:
        raise ValueError("empty dataset")
    dtype = cfg.torch_dtype
    train_set, val_set = split_dataset(dataset, cfg.val_size, cfg.seed)
    prior = fit_atom_count_prior(train_set)

    model = build_model(vocab, cfg).to(dtype)
    opt, sched = _make_optim(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    step, epoch, history = 0, 0, []
    if resume is not None:
        model.load_state_dict({k: v.to(dtype) if v.is_floating_point() else v for k, v in resume.model_state.items()})
        if resume.optim_state is not None:
            opt.load_state_dict(_cast_optim(resume.optim_state, dtype))
        if resume.sched_state is not None:
            sched.load_state_dict(resume.sched_state)
        if resume.rng_state is not None:
            gen.set_state(resume.rng_state)
        step, epoch, history = resume.step, resume.epoch, list(resume.history)

    stop = cfg.max_steps if max_steps is None else max_steps
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    eval_every = cfg.eval_every or steps_per_epoch

    def snapshot() -> Checkpoint:
        return Checkpoint(
            config=cfg,
            vocab=vocab,
            prior=prior,
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            optim_state=copy.deepcopy(opt.state_dict()),
            sched_state=_sched_state(sched),
            rng_state=gen.get_state(),
            step=step,
            epoch=epoch,
            history=list(history),
        )

    last_good = snapshot()
    t0 = time.time()
    model.train()
    while step < stop:
        # epoch order depends only on (seed, epoch) so resumed runs see the same batches
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        b_in_epoch = step - epoch * steps_per_epoch
        for b in range(b_in_epoch, steps_per_epoch):
            if step >= stop:
                break
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = collate([train_set[i] for i in idx], model.num_types, dtype)
            try:
                terms = batch_loss(model, batch, cfg, gen).mean()
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"non-finite forward pass at step {step}: {exc}", last_good) from exc
            if not torch.isfinite(terms.total):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: recon_x={float(terms.recon_x)}, "
                    f"recon_v={float(terms.recon_v)}, reg={float(terms.reg)}",
                    last_good,
                )
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip if cfg.grad_clip > 0 else math.inf)
            if not torch.isfinite(gnorm):
                raise TrainingDivergedError(f"non-finite gradient at step {step}", last_good)
            opt.step()
            step += 1
            history.append(terms.total.item())
            if callback is not None:
                callback(step, terms)
            if step % eval_every == 0:
                model.eval()
                try:
                    val = evaluate(model, val_set, cfg, seed=cfg.seed + 7919 * step)
                except FloatingPointError as exc:
                    raise TrainingDivergedError(f"non-finite validation pass at step {step}: {exc}", last_good) from exc
                if not math.isfinite(val):
                    raise TrainingDivergedError(f"non-finite validation loss at step {step}", last_good)
                model.train()
                sched.step(val)
                log.info("step %d  loss %.4f  val %.4f  lr %.2e  (%.0fs)", step, history[-1], val, opt.param_groups[0]["lr"], time.time() - t0)
                last_good = snapshot()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, last_good)
        else:
            epoch += 1
    model.eval()
    final = snapshot()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, final)
    return final


def _sched_state(sched) -> dict:
    st = sched.state_dict()
    return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in st.items()}


def _cast_optim(state: dict, dtype) -> dict:
    out = {"param_groups": copy.deepcopy(state["param_groups"]), "state": {}}
    for idx, st in state["state"].items():
        out["state"][idx] = {k: (v.to(dtype) if torch.is_tensor(v) and v.is_floating_point() and k != "step" else v) for k, v in st.items()}
    return out
