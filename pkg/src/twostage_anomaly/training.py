"""Two-stage training, impression materialization, evaluation and ablations.

Output directory layout written by the functions here::

    out/checkpoints/   ie.pt, ie_last.pt, ie_best.pt, expert*.pt
    out/impressions/   <index>.npy, sources/<index>.npy, manifest.json
    out/maps/          <item>.png (normalized, heatmap) and <item>.npy (raw)
    out/masks/         <item>.png
    out/report.json
    out/log.txt
"""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import artifacts
from .config import AblationConfig, ExperimentConfig
from .data import DatasetHandle, preprocess, read_image
from .errors import (AnomalyError, BatchTooSmallError, EmptyInputError,
                     FingerprintMismatchError, ModelNotReadyError, StaleImpressionsError,
                     TrainingDivergedError)
from .expertnet import ExpertNet, expert_loss
from .ienet import (IENet, discriminator_cross_entropy, ie_reconstruction_loss, ie_total_loss,
                    random_derangement)
from .metrics import EvaluationReport, ItemResult, aggregate_report
from .perceptual import AnomalyMap, anomaly_map, build_backbone, image_score, segment

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


# ----------------------------------------------------------------------
# Small helpers

def to_tensor(images) -> torch.Tensor:
    """(N, H, W, C) array in [0, 1] -> float32 (N, C, H, W) tensor."""
    if torch.is_tensor(images):
        return images
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32).transpose(0, 3, 1, 2)))


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def images_of(data) -> torch.Tensor:
    if isinstance(data, DatasetHandle):
        if len(data) == 0:
            raise EmptyInputError("dataset has no items")
        return to_tensor(data.stack_images())
    return to_tensor(data)


class _RunLog:
    def __init__(self, out_dir):
        self.path = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            self.path = Path(out_dir) / "log.txt"

    def __call__(self, msg: str):
        log.info(msg)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(msg + "\n")


@contextlib.contextmanager
def output_lock(out_dir):
    """Exclusive ownership of an output directory for one run."""
    if out_dir is None:
        yield
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        owner = lock.read_text().strip()
        if owner.isdigit() and _pid_alive(int(owner)) and int(owner) != os.getpid():
            raise AnomalyError(f"{out_dir} is locked by process {owner}") from None
        lock.unlink(missing_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def _optimizer(name, params, lr, momentum=0.9):
    params = list(params)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    return torch.optim.Adam(params, lr=lr)


def _seeded_model(cls, config: ExperimentConfig, offset: int = 0):
    with torch.random.fork_rng():
        torch.manual_seed(config.seed + offset)
        return cls(config)


def _schedule(n: int, batch: int, epochs: int, max_steps: int):
    steps_per_epoch = max(1, n // batch)
    total = max_steps if max_steps > 0 else epochs * steps_per_epoch
    return steps_per_epoch, total


def _epoch_batches(n, batch, steps_per_epoch, gen):
    order = torch.randperm(n, generator=gen)
    size = min(batch, n)
    return [order[i * size:(i + 1) * size] for i in range(steps_per_epoch)]


# ----------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, kind: str, model, config: ExperimentConfig, step: int, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": CHECKPOINT_FORMAT, "kind": kind, "step": step,
               "image_size": config.image_size,
               "model_fingerprint": config.model_fingerprint(),
               "config": config.to_dict(), "state": model.state_dict(), **extra}
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def _load_checkpoint(path, kind, cls, config=None):
    path = Path(path)
    if not path.is_file():
        raise ModelNotReadyError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - any unpickling failure means unusable
        raise ModelNotReadyError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("kind") != kind:
        raise ModelNotReadyError(f"{path} is not a {kind} checkpoint (format {CHECKPOINT_FORMAT})")
    saved = ExperimentConfig.from_dict(payload["config"])
    if config is not None:
        if payload["image_size"] != config.image_size:
            raise FingerprintMismatchError(
                f"{path} was trained at image_size={payload['image_size']}, "
                f"config asks for {config.image_size}")
        if payload["model_fingerprint"] != config.model_fingerprint():
            raise FingerprintMismatchError(f"{path} does not match the configured architecture")
    model = cls(saved)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload


def load_ie_checkpoint(path, config=None) -> IENet:
    return _load_checkpoint(path, "ie-net", IENet, config)[0]


def load_expert_checkpoint(path, config=None) -> ExpertNet:
    return _load_checkpoint(path, "expert-net", ExpertNet, config)[0]


def file_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    ie_model: IENet | None = None  # set when stage one was fine-tuned jointly

    def final(self, key: str, window: int = 10) -> float:
        vals = [h[key] for h in self.history[-window:]]
        return float(np.mean(vals))


def _save_history(out_dir, name, history):
    if out_dir is not None:
        (Path(out_dir) / f"{name}_history.json").write_text(json.dumps(history, indent=1))


# ----------------------------------------------------------------------
# Stage one

def train_ie_net(config: ExperimentConfig, train_data, out_dir=None) -> TrainResult:
    """Alternating updates: a discriminator step on the cross-entropy term,
    then a step of encoder, moment head and decoder on the full objective."""
    x_all = images_of(train_data)
    tc, use_mi = config.train, config.ablation.use_mi_loss
    if use_mi and min(tc.batch_size, len(x_all)) < 2:
        raise BatchTooSmallError("the mutual-information loss needs batches of >= 2 images")
    model = _seeded_model(IENet, config)
    model.train()
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt_g = _optimizer(tc.ie_optimizer, model.generator_parameters(), tc.ie_lr, tc.ie_momentum)
    opt_t = _optimizer(tc.ie_optimizer, model.disc.parameters(), tc.ie_lr, tc.ie_momentum)
    steps_per_epoch, total_steps = _schedule(len(x_all), tc.batch_size, tc.ie_epochs,
                                             tc.ie_max_steps)
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    say = _RunLog(out_dir)
    say(f"train-ie: {len(x_all)} images, {total_steps} steps, mi={use_mi}")
    history, step, best, last_good = [], 0, float("inf"), None
    lam, lam1 = config.ie.lam_kl, config.ie.lam_rec
    while step < total_steps:
        epoch_losses = []
        for idx in _epoch_batches(len(x_all), tc.batch_size, steps_per_epoch, gen):
            if step >= total_steps:
                break
            xb = x_all[idx]
            perm = noise = None
            if use_mi:
                perm = random_derangement(len(xb), gen)
                noise = torch.randn((len(xb), config.ie.d_z), generator=gen)
                # discriminator step on detached codes
                with torch.no_grad():
                    z, pooled = model.encoder(xb)
                    z_tilde = model.estimate_moments(z).sample(noise)
                p_pos, p_neg = model.disc(pooled, z), model.disc(pooled[perm], z_tilde)
                loss_t = discriminator_cross_entropy(p_pos, p_neg)
                opt_t.zero_grad()
                loss_t.backward()
                opt_t.step()
            model.disc.requires_grad_(False)
            parts = model.losses(xb, perm, noise, use_mi=use_mi)
            total, comps = ie_total_loss(parts["l_t"], parts["kl"], parts["l_d"],
                                         lam if use_mi else 0.0, lam1)
            if not torch.isfinite(total):
                raise TrainingDivergedError(f"IE-Net loss became {total.item()} at step {step}",
                                            last_good)
            opt_g.zero_grad()
            total.backward()
            if tc.clip_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(list(model.generator_parameters()),
                                               tc.clip_grad_norm)
            opt_g.step()
            model.disc.requires_grad_(True)
            rec = {"step": step, "total": total.item(),
                   **{k: float(v.item()) for k, v in comps.items()}}
            history.append(rec)
            epoch_losses.append(rec["total"])
            step += 1
        if ckpt_dir is not None and epoch_losses:
            last_good = save_checkpoint(ckpt_dir / "ie_last.pt", "ie-net", model, config, step)
            if np.mean(epoch_losses) < best:
                best = float(np.mean(epoch_losses))
                save_checkpoint(ckpt_dir / "ie_best.pt", "ie-net", model, config, step)
        if history and (step % max(1, total_steps // 10) < steps_per_epoch or step >= total_steps):
            say(f"train-ie step {step}: " + ", ".join(
                f"{k}={history[-1][k]:.4f}" for k in ("total", "l_t", "kl", "l_d")))
    model.eval()
    ckpt = None
    if ckpt_dir is not None:
        ckpt = save_checkpoint(ckpt_dir / "ie.pt", "ie-net", model, config, step)
        _save_history(out_dir, "ie", history)
    return TrainResult(model, history, ckpt)


def compute_impressions(model: IENet, images, batch: int = 16) -> torch.Tensor:
    x = images_of(images)
    model.eval()
    with torch.no_grad():
        return torch.cat([model.impression(x[i:i + batch]) for i in range(0, len(x), batch)])


@dataclass
class ImpressionDataset:
    pairs: list[tuple[str, str]]
    fingerprint: str
    root: Path

    def load(self):
        """Return ``(x, m)`` tensors of source images and their impressions."""
        xs, ms = [], []
        for src, imp in self.pairs:
            xs.append(np.load(self.root / src))
            ms.append(np.load(self.root / imp))
        return to_tensor(np.stack(xs)), to_tensor(np.stack(ms))

    @classmethod
    def open(cls, root) -> "ImpressionDataset":
        root = Path(root)
        manifest = root / "impressions" / "manifest.json"
        if not manifest.is_file():
            raise ModelNotReadyError(f"no impression set at {manifest}")
        data = json.loads(manifest.read_text())
        return cls([tuple(p) for p in data["pairs"]], data["fingerprint"], root)


def generate_impression_set(ie_checkpoint, train_data: DatasetHandle, out_dir,
                            force: bool = False) -> ImpressionDataset:
    """Materialize one impression per training image next to a copy of the
    preprocessed source, tagged with the producing checkpoint's digest."""
    out_dir = Path(out_dir)
    fingerprint = file_fingerprint(ie_checkpoint)
    manifest = out_dir / "impressions" / "manifest.json"
    if manifest.is_file() and not force:
        old = json.loads(manifest.read_text())["fingerprint"]
        if old != fingerprint:
            raise StaleImpressionsError(
                f"impressions in {manifest.parent} came from checkpoint {old}, "
                f"current is {fingerprint}; regenerate with force")
    model = load_ie_checkpoint(ie_checkpoint)
    x = images_of(train_data)
    m = compute_impressions(model, x)
    (out_dir / "impressions" / "sources").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(len(x)):
        src = f"impressions/sources/{i:05d}.npy"
        imp = f"impressions/{i:05d}.npy"
        np.save(out_dir / src, to_numpy(x[i:i + 1])[0])
        np.save(out_dir / imp, to_numpy(m[i:i + 1])[0])
        pairs.append((src, imp))
    keys = [it.key for it in train_data.items] if isinstance(train_data, DatasetHandle) else []
    manifest.write_text(json.dumps({"fingerprint": fingerprint, "pairs": pairs,
                                    "items": keys}, indent=1) + "\n")
    return ImpressionDataset(pairs, fingerprint, out_dir)


# ----------------------------------------------------------------------
# Stage two

def train_expert_net(config: ExperimentConfig, data, out_dir=None,
                     ie_checkpoint=None, ie_model=None) -> TrainResult:
    """Supervised training on (image, impression) pairs.

    ``data`` is an :class:`ImpressionDataset` or an ``(x, m)`` pair of
    arrays/tensors.  With ``ie_checkpoint`` given, the impression set's
    fingerprint must match it.

    With ``train.freeze_ie`` off, stage one is fine-tuned jointly: the
    impressions are recomputed every step from ``ie_model`` (or the
    checkpoint), its reconstruction loss is added, and the reconstruction
    term back-propagates into it.  The fine-tuned copy is returned as
    ``ie_model`` and saved as ``checkpoints/ie_joint.pt``.
    """
    if isinstance(data, ImpressionDataset):
        if ie_checkpoint is not None and file_fingerprint(ie_checkpoint) != data.fingerprint:
            raise StaleImpressionsError("impression set does not match the IE-Net checkpoint")
        x_all, m_all = data.load()
    else:
        x_all, m_all = (to_tensor(a) for a in data)
    if len(x_all) == 0:
        raise EmptyInputError("no training pairs")
    joint = not config.train.freeze_ie
    ie = None
    if joint:
        ie = ie_model if ie_model is not None else (
            load_ie_checkpoint(ie_checkpoint, config) if ie_checkpoint is not None else None)
        if ie is None:
            raise ModelNotReadyError("joint fine-tuning (train.freeze_ie=false) needs IE-Net")
        ie = copy.deepcopy(ie)
        ie.train()
    tc, ec = config.train, config.expert
    guided = config.ablation.use_detail_guidance
    model = _seeded_model(ExpertNet, config, offset=2)
    model.train()
    gen = torch.Generator().manual_seed(config.seed + 3)
    params = list(model.parameters()) + (list(ie.generator_parameters()) if joint else [])
    opt = _optimizer(tc.expert_optimizer, params, tc.expert_lr)
    steps_per_epoch, total_steps = _schedule(len(x_all), tc.batch_size, tc.expert_epochs,
                                             tc.expert_max_steps)
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    say = _RunLog(out_dir)
    say(f"train-expert: {len(x_all)} pairs, {total_steps} steps, guidance={guided}")
    history, step, best, last_good = [], 0, float("inf"), None
    while step < total_steps:
        epoch_losses = []
        for idx in _epoch_batches(len(x_all), tc.batch_size, steps_per_epoch, gen):
            if step >= total_steps:
                break
            xb, mb = x_all[idx], m_all[idx]
            if joint:
                mb = ie.impression(xb)
            s = None if guided else torch.randn((len(xb), ec.d_s), generator=gen)
            out = model(xb, mb, s=s, stop_grad_detail=ec.stop_grad_detail)
            # the naive impression chases m; it must not drag m towards itself
            total, comps = expert_loss(xb, mb.detach(), out["x_hat"], out["m_hat"], out["s"],
                                       out["s_hat"], ec.w_x, ec.w_m, ec.w_s)
            if joint:
                comps["l_d"] = ie_reconstruction_loss(mb, xb)
                total = total + config.ie.lam_rec * comps["l_d"]
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"Expert-Net loss became {total.item()} at step {step}", last_good)
            opt.zero_grad()
            total.backward()
            if tc.clip_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(params, tc.clip_grad_norm)
            opt.step()
            rec = {"step": step, "total": total.item(),
                   **{k: float(v.item()) for k, v in comps.items()}}
            history.append(rec)
            epoch_losses.append(rec["total"])
            step += 1
        if ckpt_dir is not None and epoch_losses:
            last_good = save_checkpoint(ckpt_dir / "expert_last.pt", "expert-net", model,
                                        config, step)
            if np.mean(epoch_losses) < best:
                best = float(np.mean(epoch_losses))
                save_checkpoint(ckpt_dir / "expert_best.pt", "expert-net", model, config, step)
        if history and (step % max(1, total_steps // 10) < steps_per_epoch or step >= total_steps):
            say(f"train-expert step {step}: " + ", ".join(
                f"{k}={history[-1][k]:.4f}" for k in ("total", "l_x", "l_m", "l_s")))
    model.eval()
    ckpt = None
    if ckpt_dir is not None:
        ckpt = save_checkpoint(ckpt_dir / "expert.pt", "expert-net", model, config, step)
        _save_history(out_dir, "expert", history)
    if joint:
        ie.eval()
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / "ie_joint.pt", "ie-net", ie, config, step)
    return TrainResult(model, history, ckpt, ie_model=ie)


# ----------------------------------------------------------------------
# Inference and evaluation

def _resolve(model_or_path, loader, config):
    if model_or_path is None:
        return None
    if isinstance(model_or_path, (str, os.PathLike)):
        return loader(model_or_path, config)
    if model_or_path.image_size != config.image_size:
        raise FingerprintMismatchError("model image size differs from the configuration")
    model_or_path.eval()
    return model_or_path


def reconstruct_all(ie: IENet, expert: ExpertNet | None, x: torch.Tensor,
                    config: ExperimentConfig, gen: torch.Generator | None = None) -> dict:
    """Impression, high-fidelity reconstruction and naive impression of ``x``."""
    with torch.no_grad():
        m = ie.impression(x)
        out = {"x": x, "m": m, "x_hat": None, "m_hat": None}
        if expert is not None and config.ablation.use_expert_net:
            if config.ablation.use_detail_guidance:
                s = expert.extract_details(x)
            else:
                s = torch.randn((len(x), config.expert.d_s), generator=gen)
            out["x_hat"] = expert.reconstruct(m, s)
            out["m_hat"] = expert.naive_impression(x)
    return out


def score_batch(recon: dict, config: ExperimentConfig, backbone) -> torch.Tensor:
    ab = config.ablation
    use_expert = ab.use_expert_net and recon["x_hat"] is not None
    return anomaly_map(recon["x"], recon["x_hat"], recon["m"], recon["m_hat"], backbone,
                       config.pm.layer_weights, use_expert=use_expert,
                       use_naive_term=ab.use_naive_impression_term, mode=config.pm.mode)


def _item_name(key: str) -> str:
    return key.replace("/", "_").rsplit(".", 1)[0]


def evaluate(ie, expert, test_data: DatasetHandle, config: ExperimentConfig, out_dir=None,
             backbone=None, return_items: bool = False, batch: int = 8):
    """Score every test image and pool metrics per category.

    ``ie`` / ``expert`` are models or checkpoint paths; ``expert`` may be
    ``None`` when ``use_expert_net`` is off.  With ``out_dir`` the maps,
    masks and ``report.json`` are written there.
    """
    if len(test_data) == 0:
        raise EmptyInputError("test set is empty")
    ie = _resolve(ie, load_ie_checkpoint, config)
    if ie is None:
        raise ModelNotReadyError("an IE-Net model or checkpoint is required")
    expert = _resolve(expert, load_expert_checkpoint, config) if config.ablation.use_expert_net \
        else None
    if config.ablation.use_expert_net and expert is None:
        raise ModelNotReadyError("use_expert_net is on but no Expert-Net was given")
    if backbone is None and config.pm.mode == "perceptual":
        backbone = build_backbone(config.pm)
    gen = torch.Generator().manual_seed(config.seed + 4)
    out = Path(out_dir) if out_dir is not None else None
    results = []
    items = test_data.items
    for start in range(0, len(items), batch):
        chunk = items[start:start + batch]
        x = to_tensor(np.stack([test_data.load_image(it) for it in chunk]))
        raw = score_batch(reconstruct_all(ie, expert, x, config, gen), config, backbone)
        for it, e in zip(chunk, raw.numpy()):
            amap = AnomalyMap.from_raw(e, config.pm.normalization, config.pm.percentile)
            mask = segment(amap, config.pm.alpha).y
            gt = test_data.load_mask(it) if it.has_mask or not it.is_anomalous else None
            results.append(ItemResult(it.key, it.category, it.is_anomalous,
                                      image_score(amap, config.pm.top_k_fraction),
                                      amap.normalized, mask, gt))
            if out is not None:
                name = _item_name(it.key)
                artifacts.save_heatmap(out / "maps" / f"{name}.png", amap.normalized)
                artifacts.save_raw(out / "maps" / f"{name}.npy", amap.raw)
                artifacts.save_mask(out / "masks" / f"{name}.png", mask)
    report = aggregate_report(results, config.fingerprint())
    report.notes.append(f"backbone={config.pm.backbone}; measurement={config.pm.mode}; "
                        f"normalization={config.pm.normalization}; alpha={config.pm.alpha}")
    if out is not None:
        (out / "report.json").write_text(report.to_json())
    return (report, results) if return_items else report


def detect(ie, expert, image, config: ExperimentConfig, out_dir, backbone=None) -> dict:
    """Write the impression, reconstruction, naive impression, heatmap and
    mask of one image (five PNGs) plus the raw anomaly map (``.npy``)."""
    ie = _resolve(ie, load_ie_checkpoint, config)
    expert = _resolve(expert, load_expert_checkpoint, config)
    if ie is None or expert is None:
        raise ModelNotReadyError("detect needs both trained stages")
    if isinstance(image, (str, os.PathLike)):
        image = read_image(image)
    x = to_tensor(preprocess(image, config.image_size, config.channels)[None])
    if backbone is None and config.pm.mode == "perceptual":
        backbone = build_backbone(config.pm)
    cfg = dataclasses.replace(config, ablation=dataclasses.replace(config.ablation,
                                                                   use_expert_net=True))
    gen = torch.Generator().manual_seed(config.seed + 4)
    recon = reconstruct_all(ie, expert, x, cfg, gen)
    raw = score_batch(recon, cfg, backbone)[0].numpy()
    amap = AnomalyMap.from_raw(raw, config.pm.normalization, config.pm.percentile)
    mask = segment(amap, config.pm.alpha)
    out = Path(out_dir)
    paths = {
        "impression": artifacts.save_image(out / "impression.png", to_numpy(recon["m"])[0]),
        "reconstruction": artifacts.save_image(out / "reconstruction.png",
                                               to_numpy(recon["x_hat"])[0]),
        "naive_impression": artifacts.save_image(out / "naive_impression.png",
                                                 to_numpy(recon["m_hat"])[0]),
        "heatmap": artifacts.save_heatmap(out / "heatmap.png", amap.normalized),
        "mask": artifacts.save_mask(out / "mask.png", mask.y),
        "raw": artifacts.save_raw(out / "anomaly_raw.npy", amap.raw),
    }
    return {"paths": paths, "score": image_score(amap, config.pm.top_k_fraction),
            "map": amap, "mask": mask}


# ----------------------------------------------------------------------
# Ablations

def _toggles(mi, en, guide, naive):
    return AblationConfig(use_mi_loss=mi, use_expert_net=en, use_detail_guidance=guide,
                          use_naive_impression_term=naive)


# (name, toggles) for the seven comparison rows: mutual information, expert
# net, detail guidance, naive-impression term.
ABLATION_ROWS = [
    ("baseline", _toggles(False, False, False, False)),
    ("mi", _toggles(True, False, False, False)),
    ("en", _toggles(False, True, False, False)),
    ("mi+en", _toggles(True, True, False, False)),
    ("en+guide", _toggles(False, True, True, False)),
    ("mi+en+guide", _toggles(True, True, True, False)),
    ("full", _toggles(True, True, True, True)),
]

SINGLE_DISABLED_ROWS = [
    ("full", _toggles(True, True, True, True)),
    ("no_mi", _toggles(False, True, True, True)),
    ("no_en", _toggles(True, False, True, True)),
    ("no_guide", _toggles(True, True, False, True)),
    ("no_naive", _toggles(True, True, True, False)),
]


@dataclass
class AblationOutcome:
    reports: dict[str, EvaluationReport]

    def to_dict(self):
        return {name: r.to_dict() for name, r in self.reports.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return "   -  " if v is None else f"{v:6.3f}"

        lines = [f"{'row':<14} {'IoU':>6} {'pxAUC':>6} {'imAUC':>6}"]
        for name, r in self.reports.items():
            lines.append(f"{name:<14} {fmt(r.mean_iou)} {fmt(r.mean_pixel_auroc)} "
                         f"{fmt(r.mean_image_auroc)}")
        return "\n".join(lines)


def run_ablation(config: ExperimentConfig, train_data, test_data, rows=ABLATION_ROWS,
                 out_dir=None, backbone=None, ie_models=None,
                 expert_models=None) -> AblationOutcome:
    """Evaluate each toggle row, training each distinct stage only once.

    IE-Net depends only on the mutual-information toggle; Expert-Net also on
    detail guidance.  The naive-impression toggle affects scoring alone.
    Stages trained earlier under ``config`` can be passed in to skip
    retraining: ``ie_models`` keyed by ``use_mi_loss`` and ``expert_models``
    by ``(use_mi_loss, use_detail_guidance)``.
    """
    if backbone is None and config.pm.mode == "perceptual":
        backbone = build_backbone(config.pm)
    ie_cache, expert_cache, reports = dict(ie_models or {}), dict(expert_models or {}), {}
    for name, toggles in rows:
        cfg = dataclasses.replace(config, ablation=toggles)
        mi = toggles.use_mi_loss
        if mi not in ie_cache:
            ie_cache[mi] = train_ie_net(cfg, train_data).model
        ie = ie_cache[mi]
        expert = None
        if toggles.use_expert_net:
            key = (mi, toggles.use_detail_guidance)
            if key not in expert_cache:
                x = images_of(train_data)
                expert_cache[key] = train_expert_net(cfg, (x, compute_impressions(ie, x))).model
            expert = expert_cache[key]
        row_dir = Path(out_dir) / name if out_dir is not None else None
        reports[name] = evaluate(ie, expert, test_data, cfg, row_dir, backbone=backbone)
    outcome = AblationOutcome(reports)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(outcome.to_json())
    return outcome
