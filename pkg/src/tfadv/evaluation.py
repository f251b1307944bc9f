"""Experiment orchestration: data, model zoo, attack/victim matrix, artifacts.

A run writes the following tree under ``plan.out_dir``::

    datasets/{train,test}/        TFSIG001 records + manifest.json
    models/<arch>.bin             trained weights
    results/training.csv          per-model accuracy
    results/matrix.csv            one row per (attack, source, victim)
    results/samples/<attack>_<source>.csv
    results/samples/stds_<source>_metrics.csv
    results/waveforms/stds_<source>/   adversarial waveforms (TFSIG001)
    figures/<attack>_<source>_<id>.<fmt>   clean | adversarial | noise triptychs

Success rates count only samples the victim classifies correctly when clean
(the "eligible" set); this is also stated in the matrix CSV header comment.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .attacks import METHODS as IMAGE_METHODS
from .attacks import AttackConfig, attack_batch
from .errors import ConfigError, TfadvError
from .render import ColorLut, parula, receive, write_image
from .stds import StdsConfig, stds_batch
from .tfa import WindowSpec
from .waveforms import Dataset, TimeSignal, WaveformConfig, generate_dataset, save_dataset

log = logging.getLogger(__name__)

ALL_METHODS = IMAGE_METHODS + ("stds",)
# Learning rates that train each architecture reliably with plain SGD.
TRAIN_LR = {"tinyA": 0.01, "tinyB": 0.05, "tinyC": 0.03}
ELIGIBILITY_NOTE = "rates over samples the victim classifies correctly when clean"
_CHUNK = 100


class EligibilityError(TfadvError, ValueError):
    """No sample qualifies for a success-rate computation."""


@dataclass(frozen=True)
class ExperimentPlan:
    out_dir: Path
    waveform: WaveformConfig = field(default_factory=WaveformConfig)
    train_per_class: int = 300
    test_per_class: int = 100
    data_seed: int = 1
    models: tuple[str, ...] = nn.ARCH_IDS
    sources: tuple[str, ...] | None = None  # default: all models
    victims: tuple[str, ...] | None = None  # default: all models
    attacks: tuple[str, ...] = ALL_METHODS
    epochs: int = 20
    learning_rates: dict = field(default_factory=lambda: dict(TRAIN_LR))
    train_seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    stds: StdsConfig = field(default_factory=StdsConfig)
    window: WindowSpec = field(default_factory=WindowSpec)
    attack_samples: int | None = None  # cap on test samples attacked (None: all)
    figures_per_cell: int = 3
    image_format: str = "ppm"
    threads: int = 1
    model_files: dict = field(default_factory=dict)  # arch -> existing weight file

    def __post_init__(self):
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "sources", tuple(self.sources or self.models))
        object.__setattr__(self, "victims", tuple(self.victims or self.models))
        self.validate()

    def validate(self) -> None:
        for a in self.models:
            nn.get_arch(a)
        missing = set(self.sources) | set(self.victims)
        missing -= set(self.models)
        if missing:
            raise ConfigError(f"sources/victims not in model list: {sorted(missing)}")
        bad = [a for a in self.attacks if a not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown attacks {bad}; valid: {', '.join(ALL_METHODS)}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.image_format not in ("ppm", "png"):
            raise ConfigError(f"unknown image format {self.image_format!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.waveform.validate()

    def lr_for(self, arch: str) -> float:
        return float(self.learning_rates.get(arch, 0.01))

    def echo(self) -> dict:
        """JSON-serialisable summary of every setting that affects results."""
        d = {
            "waveform": asdict(self.waveform), "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class, "data_seed": self.data_seed,
            "models": list(self.models), "sources": list(self.sources),
            "victims": list(self.victims), "attacks": list(self.attacks),
            "epochs": self.epochs,
            "learning_rates": {a: self.lr_for(a) for a in self.models},
            "train_seed": self.train_seed, "attack": asdict(self.attack),
            "stds": asdict(self.stds), "window": asdict(self.window),
            "attack_samples": self.attack_samples,
        }
        return json.loads(json.dumps(d))


@dataclass(frozen=True)
class Cell:
    rate: float  # percent
    successes: int
    eligible: int
    mean_l2: float  # image domain, 0-255 units, over successful eligible samples
    mean_linf: float  # image domain, 0-255 units, over all attacked samples


@dataclass
class TransferMatrix:
    entries: dict = field(default_factory=dict)  # (attack, source, victim) -> Cell

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, key) -> Cell:
        return self.entries[key]

    def rate(self, attack, source, victim) -> float:
        return self.entries[(attack, source, victim)].rate

    def add(self, attack, source, victim, cell: Cell) -> None:
        if not 0.0 <= cell.rate <= 100.0:
            raise ValueError(f"rate {cell.rate} outside [0, 100]")
        self.entries[(attack, source, victim)] = cell

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {ELIGIBILITY_NOTE}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "source", "victim", "success_rate", "successes", "eligible",
                    "mean_l2", "mean_linf"])
        for (a, s, v), c in self.entries.items():
            w.writerow([a, s, v, f"{c.rate:.2f}", c.successes, c.eligible,
                        f"{c.mean_l2:.4f}", f"{c.mean_linf:.4f}"])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read(cls, path) -> "TransferMatrix":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no matrix file at {path}")
        rows = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
        m = cls()
        try:
            for r in csv.DictReader(rows):
                m.add(r["attack"], r["source"], r["victim"], Cell(
                    float(r["success_rate"]), int(r["successes"]), int(r["eligible"]),
                    float(r["mean_l2"]), float(r["mean_linf"])))
        except (KeyError, ValueError, TypeError) as e:
            from .errors import FormatError

            raise FormatError(f"{path}: malformed matrix CSV ({e})") from e
        return m

    def table(self) -> str:
        """Aligned text table: one row per (attack, source), one column per victim."""
        if not self.entries:
            return "(empty matrix)\n"
        victims = list(dict.fromkeys(v for _, _, v in self.entries))
        rows = list(dict.fromkeys((a, s) for a, s, _ in self.entries))
        head = ["attack", "source"] + victims
        body = []
        for a, s in rows:
            cells = []
            for v in victims:
                c = self.entries.get((a, s, v))
                text = "-" if c is None else f"{c.rate:.2f}"
                cells.append(text + ("*" if v == s and c is not None else ""))
            body.append([a, s] + cells)
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        fmt = lambda r: "  ".join(x.ljust(w) if i < 2 else x.rjust(w)  # noqa: E731
                                  for i, (x, w) in enumerate(zip(r, widths)))
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
        lines.append(f"success rate (%); * = self-attack (white-box); {ELIGIBILITY_NOTE}")
        return "\n".join(lines) + "\n"


def _pixels(obj, which):
    if which == "adv":
        for name in ("adv_image", "tf_image_adv"):
            if hasattr(obj, name):
                return getattr(obj, name).pixels
    if hasattr(obj, "tf_image_clean"):
        return obj.tf_image_clean.pixels
    return obj.adv_image.pixels - obj.noise_image


def success_rate(outcomes, victim: nn.Model | None = None) -> float:
    """Percentage of eligible outcomes that fool the victim.

    With a victim, a sample is eligible when the victim labels its clean image
    ``label_clean`` and succeeds when it labels the adversarial image
    differently. Without one, every outcome is eligible and its own success
    flag is used.
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise EligibilityError("no outcomes")
    y = np.array([o.label_clean for o in outcomes])
    if victim is None:
        flags = [getattr(o, "success", getattr(o, "success_replay", False)) for o in outcomes]
        return 100.0 * float(np.mean(flags))
    clean = np.stack([_pixels(o, "clean") for o in outcomes])
    adv = np.stack([_pixels(o, "adv") for o in outcomes])
    ok = victim.predict(clean) == y
    if not ok.any():
        raise EligibilityError("victim misclassifies every clean sample")
    return 100.0 * float(np.mean(victim.predict(adv)[ok] != y[ok]))


# -- run --------------------------------------------------------------------------

@dataclass
class RunReport:
    matrix: TransferMatrix
    accuracy: dict  # arch -> test accuracy
    timings: dict  # step name -> seconds (not written to disk)
    out_dir: Path


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _noise_view(noise: np.ndarray) -> np.ndarray:
    """Map a signed perturbation to [0, 1] for display, mid-grey at zero."""
    peak = np.abs(noise).max()
    if peak == 0:
        return np.full_like(noise, 0.5)
    return np.clip(0.5 + noise / (2 * peak), 0.0, 1.0)


def triptych(clean: np.ndarray, adv: np.ndarray, gap: int = 2) -> np.ndarray:
    """Clean, adversarial and amplified noise images side by side."""
    sep = np.ones((clean.shape[0], gap, 3))
    img = np.concatenate([clean, sep, adv, sep, _noise_view(adv - clean)], axis=1)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("triptych pixels outside [0, 1]")
    return img


def _prepare_data(plan: ExperimentPlan):
    root = plan.out_dir / "datasets"
    train = generate_dataset(plan.train_per_class, plan.waveform, plan.data_seed, split=0)
    test = generate_dataset(plan.test_per_class, plan.waveform, plan.data_seed, split=1)
    save_dataset(train, root / "train", {"split": "train"})
    save_dataset(test, root / "test", {"split": "test"})
    return train, test


def _prepare_models(plan: ExperimentPlan, x_tr, y_tr, x_te, y_te, timings):
    models, acc, rows = {}, {}, []
    mdir = plan.out_dir / "models"
    mdir.mkdir(parents=True, exist_ok=True)
    for arch in plan.models:
        t0 = time.perf_counter()
        if arch in plan.model_files:
            path = Path(plan.model_files[arch])
            if not path.is_file():
                raise FileNotFoundError(f"model file not found: {path}")
            model = nn.load(path)
            if model.arch.id != arch:
                raise ConfigError(f"{path} holds {model.arch.id}, expected {arch}")
        else:
            model, _ = nn.train(nn.init_model(arch, plan.train_seed), x_tr, y_tr,
                                epochs=plan.epochs, lr=plan.lr_for(arch), seed=plan.train_seed)
        timings[f"train:{arch}"] = time.perf_counter() - t0
        nn.save(model, mdir / f"{arch}.bin")
        # attack and score the float32 weights exactly as stored
        model = nn.load(mdir / f"{arch}.bin")
        models[arch] = model
        acc[arch] = nn.accuracy(model, x_te, y_te)
        rows.append([arch, plan.epochs, plan.lr_for(arch),
                     _fmt(nn.accuracy(model, x_tr, y_tr)), _fmt(acc[arch])])
        log.info("%s test accuracy %.4f", arch, acc[arch])
    _write_csv(plan.out_dir / "results" / "training.csv",
               ["arch", "epochs", "lr", "train_accuracy", "test_accuracy"], rows)
    return models, acc


def _craft(plan: ExperimentPlan, method, model, x_img, x_sig, y, ids, lut):
    """Adversarial images (and waveforms for STDS) for all selected samples."""
    adv_img, extra = [], []
    for i in range(0, len(ids), _CHUNK):
        sl = slice(i, i + _CHUNK)
        if method == "stds":
            res = stds_batch(model, x_sig[sl], y[sl], plan.stds, plan.window, lut)
            # judge exactly the float32 waveform that gets written to disk
            res["adv"] = res["adv"].astype(np.float32).astype(np.float64)
            adv_img.append(receive(res["adv"], plan.window, lut))
            extra.append(res)
        else:
            xa, iters = attack_batch(method, model, x_img[sl], y[sl], plan.attack, indices=ids[sl])
            adv_img.append(xa)
            extra.append({"iterations_used": np.full(len(xa), iters)})
    merged = {k: np.concatenate([e[k] for e in extra]) for k in extra[0]}
    return np.concatenate(adv_img), merged


def _run_cell(plan, method, source, models, x_img, x_sig, y, ids, lut):
    t0 = time.perf_counter()
    clean = x_img[ids]
    adv, extra = _craft(plan, method, models[source], clean, x_sig[ids], y[ids], ids, lut)
    elapsed = time.perf_counter() - t0
    diff = (adv - clean) * 255
    l2 = np.sqrt(np.sum(diff**2, axis=(1, 2, 3)))
    linf = np.abs(diff).max(axis=(1, 2, 3))
    iters = extra["iterations_used"]
    cells, rows = {}, []
    for victim in plan.victims:
        vm = models[victim]
        pc, pa = vm.predict(clean), vm.predict(adv)
        ok = pc == y[ids]
        hit = ok & (pa != y[ids])
        if ok.any():
            cells[victim] = Cell(100.0 * hit.sum() / ok.sum(), int(hit.sum()), int(ok.sum()),
                                 float(l2[hit].mean()) if hit.any() else 0.0, float(linf.mean()))
        else:
            cells[victim] = None
        for j, sid in enumerate(ids):
            rows.append([int(sid), method, source, victim, int(y[sid]), int(pa[j]),
                         int(ok[j]), int(pa[j] != y[sid]), _fmt(l2[j]), _fmt(linf[j]),
                         int(iters[j])])
    res_dir = plan.out_dir / "results"
    _write_csv(res_dir / "samples" / f"{method}_{source}.csv",
               ["sample_id", "method", "source", "victim", "clean_label", "adv_label",
                "eligible", "success", "l2", "linf", "iterations"], rows)
    if method == "stds":
        _write_stds(plan, source, models[source], x_sig[ids], y[ids], ids, extra, l2)
    _write_figures(plan, method, source, clean, adv, y[ids], ids)
    return cells, elapsed


def _write_stds(plan, source, model, x, y, ids, res, l2_img):
    wdir = plan.out_dir / "results" / "waveforms" / f"stds_{source}"
    adv = res["adv"]
    ds = Dataset([TimeSignal(a, int(lbl), plan.waveform.sample_rate)
                  for a, lbl in zip(adv, y)], plan.waveform, plan.data_seed)
    save_dataset(ds, wdir, {"source_model": source, "sample_ids": [int(i) for i in ids]})
    pred = model.predict(receive(adv, plan.window))
    noise = np.linalg.norm(res["noise"], axis=1)
    ratio = noise / np.linalg.norm(x, axis=1)
    rows = [[int(sid), _fmt(l2_img[j]), _fmt(noise[j]), _fmt(ratio[j]), int(pred[j] != y[j]),
             int(res["success_inloop"][j]), int(res["iterations_used"][j])]
            for j, sid in enumerate(ids)]
    _write_csv(plan.out_dir / "results" / "samples" / f"stds_{source}_metrics.csv",
               ["sample_id", "l2_image", "l2_signal", "noise_ratio", "success_replay",
                "success_inloop", "iterations_used"], rows)


def _write_figures(plan, method, source, clean, adv, y, ids):
    if plan.figures_per_cell <= 0:
        return
    fdir = plan.out_dir / "figures"
    fdir.mkdir(parents=True, exist_ok=True)
    # first sample of each class, then further samples in order
    picks = list(dict.fromkeys([int(np.flatnonzero(y == c)[0]) for c in np.unique(y)]
                               + list(range(len(ids)))))[:plan.figures_per_cell]
    for j in picks:
        write_image(fdir / f"{method}_{source}_{int(ids[j]):05d}",
                    triptych(clean[j], adv[j]), plan.image_format)


def select_samples(n_total: int, labels, cap: int | None) -> np.ndarray:
    """Indices of the attacked samples: all, or ``cap`` spread evenly over classes."""
    if cap is None or cap >= n_total:
        return np.arange(n_total)
    labels = np.asarray(labels)
    per = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    order = [i for group in zip(*per) for i in group]
    return np.sort(np.array(order[:cap], dtype=np.intp))


def run_plan(plan: ExperimentPlan, lut: ColorLut | None = None) -> RunReport:
    """Execute a plan end to end and write all artifacts. Deterministic in its seeds."""
    lut = lut or parula()
    timings = {}
    plan.out_dir.mkdir(parents=True, exist_ok=True)
    (plan.out_dir / "plan.json").write_text(json.dumps(plan.echo(), indent=2, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    train, test = _prepare_data(plan)
    x_tr = receive(train.samples(), plan.window, lut)
    x_sig = test.samples()
    x_te = receive(x_sig, plan.window, lut)
    y_te = test.labels
    timings["data"] = time.perf_counter() - t0
    models, acc = _prepare_models(plan, x_tr, train.labels, x_te, y_te, timings)
    matrix = run_matrix(plan, models, x_sig, y_te, lut, x_te, timings)
    return RunReport(matrix, acc, timings, plan.out_dir)


def run_matrix(plan: ExperimentPlan, models: dict, signals, labels, lut: ColorLut | None = None,
               images=None, timings: dict | None = None) -> TransferMatrix:
    """Attack with every (method, source) of ``plan`` and score every victim.

    ``models`` maps architecture ids to trained models; ``signals`` are the
    test waveforms, rendered here unless ``images`` is given.
    """
    lut = lut or parula()
    timings = {} if timings is None else timings
    x_sig = np.asarray(signals, dtype=np.float64)
    y = np.asarray(labels)
    x_img = receive(x_sig, plan.window, lut) if images is None else images
    missing = [m for m in set(plan.sources) | set(plan.victims) if m not in models]
    if missing:
        raise ConfigError(f"no model supplied for {sorted(missing)}")
    matrix = TransferMatrix()
    ids = select_samples(len(y), y, plan.attack_samples)
    jobs = [(m, s) for m in plan.attacks for s in plan.sources]
    run = lambda job: _run_cell(plan, job[0], job[1], models, x_img, x_sig, y, ids, lut)  # noqa: E731
    if plan.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(plan.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for (method, source), (cells, elapsed) in zip(jobs, results):
        timings[f"attack:{method}:{source}"] = elapsed
        for victim, cell in cells.items():
            if cell is not None:
                matrix.add(method, source, victim, cell)
    if jobs:
        matrix.write(plan.out_dir / "results" / "matrix.csv")
    return matrix


