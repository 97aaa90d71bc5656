"""End-to-end pipeline steps shared by the CLI subcommands.

Workdir layout is fixed: images/ (rendered PGMs), checkpoints/, reports/,
heatmaps/, and corpus/ for generated corpora. Reports never contain
wall-clock measurements; everything measured lands in timing.json so the
primary artifacts stay byte-reproducible run to run.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as eval_mod
from .config import PipelineConfig
from .corpus import CorpusIndex, load_manifest, parse_asm_opcodes, parse_bytes_file, split_corpus
from .errors import MalfuseError, MalformedLine, MissingAsm, NoOpcodesFound
from .explain import cumulative_cam, colorize, export_features, grad_cam, superimpose, write_feature_csv
from .imaging import (
    ModalImage,
    Modality,
    bigram_grayscale,
    bit_matrix_to_image,
    entropy_series,
    image_filename,
    read_pgm,
    render_entropy_graph,
    simhash_bit_matrix,
    write_pgm,
    write_png,
)
from .model import (
    BranchConfig,
    FusionModel,
    ModelConfig,
    Sample,
    TrainConfig,
    build_model,
    evaluate_predictions,
    predict,
    train,
)
from .nnet import FuseOp, FusionSpec

MODALITY_BY_NAME = {m.value: m for m in Modality}

GRID_OPERATORS = ("concat", "add", "avg", "max")


class PreconditionError(MalfuseError):
    """A subcommand was invoked before its inputs exist."""


def workdir_layout(workdir: Path) -> dict[str, Path]:
    return {
        "images": workdir / "images",
        "checkpoints": workdir / "checkpoints",
        "reports": workdir / "reports",
        "heatmaps": workdir / "heatmaps",
        "corpus": workdir / "corpus",
    }


def modalities_from_names(names) -> tuple[Modality, ...]:
    return tuple(MODALITY_BY_NAME[n] for n in names)


def make_model_config(
    modal_names,
    operator: str | None,
    side: int,
    conv_blocks,
    feature_dim: int,
    classes: int = 9,
) -> ModelConfig:
    branches = tuple(
        BranchConfig(
            modality=MODALITY_BY_NAME[name],
            conv_blocks=tuple((int(f), int(c)) for f, c in conv_blocks),
            feature_dim=feature_dim,
        )
        for name in modal_names
    )
    fusion = None
    if operator is not None:
        fusion = FusionSpec(FuseOp(operator), input_arity=len(branches))
    return ModelConfig(branches=branches, fusion=fusion, input_side=side, classes=classes)


def row_stem(modal_names, operator: str | None) -> str:
    """Unambiguous file stem for one grid row (display labels collide once
    punctuation is stripped: GS||EG and GS+EG would both become GS_EG)."""
    return (operator or "single") + "-" + "-".join(modal_names)


def grid_rows() -> list[tuple[tuple[str, ...], str | None]]:
    """The 19 experiment rows: 3 single-modality models, then 4 operators
    over the 3 bi-modal pairs, then the 4 tri-modal fusions."""
    singles = [("gs",), ("eg",), ("sh",)]
    pairs = [("gs", "eg"), ("gs", "sh"), ("eg", "sh")]
    rows: list[tuple[tuple[str, ...], str | None]] = [(s, None) for s in singles]
    for op in GRID_OPERATORS:
        rows.extend((p, op) for p in pairs)
    rows.extend((("gs", "eg", "sh"), op) for op in GRID_OPERATORS)
    return rows


# --- ingest -------------------------------------------------------------------


def ingest_corpus(cfg: PipelineConfig) -> dict:
    """Parse every indexed sample strictly; collect per-family counts,
    unknown-byte totals, and parse errors with their locations."""
    paths = cfg["paths"]
    index = load_manifest(paths["manifest"], paths["bytes_root"], paths["asm_root"])
    per_family: dict[str, int] = {}
    unknown_total = 0
    parsed = 0
    errors: list[dict] = []
    for entry in index.entries:
        per_family[str(entry.family)] = per_family.get(str(entry.family), 0) + 1
        if not entry.bytes_missing:
            try:
                text = Path(entry.bytes_path).read_text(encoding="ascii", errors="strict")
                stream = parse_bytes_file(text, entry.sample_id)
                unknown_total += stream.unknown_count
                parsed += 1
            except MalformedLine as exc:
                errors.append(
                    {
                        "sample_id": entry.sample_id,
                        "file": Path(entry.bytes_path).name,
                        "line": exc.line_no,
                        "message": str(exc),
                    }
                )
        if not entry.asm_missing:
            try:
                text = Path(entry.asm_path).read_text(encoding="ascii", errors="replace")
                parse_asm_opcodes(text, entry.sample_id)
            except NoOpcodesFound as exc:
                errors.append(
                    {
                        "sample_id": entry.sample_id,
                        "file": Path(entry.asm_path).name,
                        "line": 0,
                        "message": str(exc),
                    }
                )
    return {
        "config_fingerprint": cfg.fingerprint(),
        "samples": len(index),
        "parsed_bytes_files": parsed,
        "per_family": dict(sorted(per_family.items())),
        "unknown_bytes_total": unknown_total,
        "missing_bytes": sorted(index.missing_bytes),
        "missing_asm": sorted(index.missing_asm),
        "parse_errors": errors,
    }


def write_ingest_report(cfg: PipelineConfig, summary: dict) -> Path:
    reports = workdir_layout(cfg.workdir())["reports"]
    reports.mkdir(parents=True, exist_ok=True)
    out = reports / "ingest.json"
    out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="ascii")
    return out


# --- rendering ------------------------------------------------------------------


def render_sample_images(
    bytes_text: str | None,
    asm_text: str | None,
    sample_id: str,
    side: int,
    row_cap: int,
    modalities,
) -> dict[Modality, np.ndarray]:
    """Generate the requested modality images for one sample."""
    images: dict[Modality, np.ndarray] = {}
    stream = None
    if Modality.GS in modalities or Modality.EG in modalities:
        stream = parse_bytes_file(bytes_text, sample_id)
    if Modality.GS in modalities:
        images[Modality.GS] = bigram_grayscale(stream, side).pixels
    if Modality.EG in modalities:
        images[Modality.EG] = render_entropy_graph(entropy_series(stream), side).pixels
    if Modality.SH in modalities:
        opcodes = parse_asm_opcodes(asm_text, sample_id)
        images[Modality.SH] = bit_matrix_to_image(simhash_bit_matrix(opcodes, row_cap), side).pixels
    return images


def _render_task(args) -> list[str]:
    entry_id, bytes_path, asm_path, side, row_cap, modal_names, out_dir = args
    modalities = modalities_from_names(modal_names)
    bytes_text = Path(bytes_path).read_text(encoding="ascii") if bytes_path else None
    asm_text = Path(asm_path).read_text(encoding="ascii", errors="replace") if asm_path else None
    images = render_sample_images(bytes_text, asm_text, entry_id, side, row_cap, modalities)
    written = []
    for modality, pixels in images.items():
        path = Path(out_dir) / image_filename(entry_id, modality)
        write_pgm(path, pixels)
        written.append(str(path))
    return written


def render_corpus(
    cfg: PipelineConfig,
    modal_names=("gs", "eg", "sh"),
    jobs: int = 1,
    index: CorpusIndex | None = None,
    side: int | None = None,
) -> dict:
    """Render requested modalities for every sample into workdir/images.

    Deterministic content: re-running writes bit-identical files. Samples
    missing a needed source file are reported, not silently skipped.
    """
    paths = cfg["paths"]
    if index is None:
        index = load_manifest(paths["manifest"], paths["bytes_root"], paths["asm_root"])
    side = side if side is not None else cfg["imaging"]["side"]
    row_cap = cfg["imaging"]["row_cap"]
    modalities = modalities_from_names(modal_names)
    out_dir = workdir_layout(cfg.workdir())["images"]
    out_dir.mkdir(parents=True, exist_ok=True)

    missing_asm = []
    missing_bytes = []
    tasks = []
    for entry in index.entries:
        need_bytes = Modality.GS in modalities or Modality.EG in modalities
        if need_bytes and entry.bytes_missing:
            missing_bytes.append(entry.sample_id)
            continue
        if Modality.SH in modalities and entry.asm_missing:
            missing_asm.append(entry.sample_id)
            continue
        tasks.append(
            (
                entry.sample_id,
                entry.bytes_path if need_bytes else None,
                entry.asm_path if Modality.SH in modalities else None,
                side,
                row_cap,
                tuple(m.value for m in modalities),
                str(out_dir),
            )
        )

    written: list[str] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for files in pool.map(_render_task, tasks):
                written.extend(files)
    else:
        for task in tasks:
            written.extend(_render_task(task))
    if missing_asm:
        raise MissingAsm("no .asm for: " + ", ".join(sorted(missing_asm)))
    return {
        "rendered": len(tasks),
        "files": len(written),
        "missing_bytes": sorted(missing_bytes),
        "side": side,
    }


def load_samples(
    index: CorpusIndex, images_dir: Path, side: int, modal_names, ids=None
) -> list[Sample]:
    """Read rendered PGMs into Sample objects, ordered by sample id."""
    modalities = modalities_from_names(modal_names)
    wanted = None if ids is None else set(ids)
    samples = []
    for entry in sorted(index.entries, key=lambda e: e.sample_id):
        if wanted is not None and entry.sample_id not in wanted:
            continue
        images = {}
        for modality in modalities:
            path = Path(images_dir) / image_filename(entry.sample_id, modality)
            if not path.is_file():
                raise PreconditionError(f"missing rendered image {path}; run `render` first")
            pixels = read_pgm(path)
            if pixels.shape != (side, side):
                raise PreconditionError(
                    f"{path} is {pixels.shape}, expected {(side, side)}; re-run `render`"
                )
            images[modality] = pixels
        samples.append(Sample(entry.sample_id, entry.family, images))
    return samples


# --- one training/evaluation run -----------------------------------------------


def run_row_seed(
    modal_names,
    operator: str | None,
    seed: int,
    train_samples,
    test_samples,
    side: int,
    cfg: PipelineConfig,
    epochs: int,
    checkpoint_path: Path | None = None,
) -> dict:
    """Train one (row, seed) model and evaluate it on the held-out set."""
    mc = make_model_config(
        modal_names,
        operator,
        side,
        cfg["model"]["conv_blocks"],
        cfg["model"]["feature_dim"],
        cfg["model"]["classes"],
    )
    tc = TrainConfig(
        epochs=epochs,
        batch_size=cfg["train"]["batch"],
        learning_rate=cfg["train"]["lr"],
        momentum=cfg["train"]["momentum"],
        seed=seed,
    )
    model = build_model(mc, seed)
    trained = train(model, train_samples, test_samples, tc)
    pairs = evaluate_predictions(model, test_samples)
    cm = eval_mod.confusion(pairs, classes=mc.classes)
    macro = eval_mod.metrics(cm, "macro")
    weighted = eval_mod.metrics(cm, "weighted")
    if checkpoint_path is not None:
        checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        model.save(checkpoint_path)
    last = trained.history[-1]
    return {
        "label": mc.label(),
        "seed": seed,
        "metrics": eval_mod.metrics_as_dict(macro, weighted),
        "family_recall": [c.recall if c.support > 0 else None for c in macro.per_class],
        "family_f1": [c.f1 if c.support > 0 else None for c in macro.per_class],
        "confusion": cm.counts.tolist(),
        "history": [
            {
                "train_loss": h.train_loss,
                "train_acc": h.train_acc,
                "val_loss": h.val_loss,
                "val_acc": h.val_acc,
            }
            for h in trained.history
        ],
        "final": {
            "train_loss": last.train_loss,
            "train_acc": last.train_acc,
            "val_loss": last.val_loss,
            "val_acc": last.val_acc,
        },
    }


_POOL_DATA: dict = {}


def _grid_pool_init(train_samples, test_samples, side, cfg_data, epochs):
    _POOL_DATA["train"] = train_samples
    _POOL_DATA["test"] = test_samples
    _POOL_DATA["side"] = side
    _POOL_DATA["cfg"] = PipelineConfig(cfg_data)
    _POOL_DATA["epochs"] = epochs


def _grid_pool_task(args):
    modal_names, operator, seed, ckpt = args
    result = run_row_seed(
        modal_names,
        operator,
        seed,
        _POOL_DATA["train"],
        _POOL_DATA["test"],
        _POOL_DATA["side"],
        _POOL_DATA["cfg"],
        _POOL_DATA["epochs"],
        checkpoint_path=Path(ckpt) if ckpt else None,
    )
    return (modal_names, operator, seed), result


def _average_family(values_per_seed: list[list[float | None]]) -> list[float | None]:
    out: list[float | None] = []
    for col in zip(*values_per_seed):
        if any(v is None for v in col):
            out.append(None)
        else:
            out.append(sum(col) / len(col))
    return out


def run_grid(
    cfg: PipelineConfig,
    train_samples,
    test_samples,
    side: int,
    epochs: int,
    checkpoints_dir: Path,
    jobs: int = 1,
) -> list[dict]:
    """Train and evaluate the 19-row grid over all configured seeds.

    The first seed's checkpoint is persisted per row. Results are keyed,
    not order-dependent, so the parallel path is exactly as deterministic
    as the sequential one.
    """
    seeds = list(cfg["train"]["seeds"])
    rows = grid_rows()
    tasks = []
    for modal_names, operator in rows:
        for pos, seed in enumerate(seeds):
            ckpt = (
                str(checkpoints_dir / f"{row_stem(modal_names, operator)}.seed{seed}.ckpt")
                if pos == 0
                else None
            )
            tasks.append((tuple(modal_names), operator, seed, ckpt))

    results: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_grid_pool_init,
            initargs=(train_samples, test_samples, side, cfg.data, epochs),
        ) as pool:
            for key, result in pool.map(_grid_pool_task, tasks):
                results[key] = result
    else:
        for modal_names, operator, seed, ckpt in tasks:
            key = (modal_names, operator, seed)
            results[key] = run_row_seed(
                modal_names,
                operator,
                seed,
                train_samples,
                test_samples,
                side,
                cfg,
                epochs,
                checkpoint_path=Path(ckpt) if ckpt else None,
            )

    report_rows = []
    for modal_names, operator in rows:
        per_seed = [results[(tuple(modal_names), operator, s)] for s in seeds]
        label = per_seed[0]["label"]
        metric_dicts = [r["metrics"] for r in per_seed]
        report_rows.append(
            {
                "label": label,
                "modalities": list(modal_names),
                "operator": operator,
                "per_seed": [
                    {"seed": r["seed"], **r["metrics"], "final": r["final"]} for r in per_seed
                ],
                "averaged": eval_mod.average_over_seeds(metric_dicts),
                "family_recall": _average_family([r["family_recall"] for r in per_seed]),
                "family_f1": _average_family([r["family_f1"] for r in per_seed]),
                "checkpoint": f"{row_stem(modal_names, operator)}.seed{seeds[0]}.ckpt",
            }
        )
    return report_rows


def reload_row_model(
    cfg: PipelineConfig, modal_names, operator, side: int, checkpoints_dir: Path, seed: int
) -> FusionModel:
    mc = make_model_config(
        modal_names, operator, side, cfg["model"]["conv_blocks"], cfg["model"]["feature_dim"],
        cfg["model"]["classes"],
    )
    model = build_model(mc, seed)
    path = checkpoints_dir / f"{row_stem(modal_names, operator)}.seed{seed}.ckpt"
    if not path.is_file():
        raise PreconditionError(f"missing checkpoint {path}; run `train` first")
    model.load(path)
    return model


def measure_timing(model: FusionModel, samples) -> eval_mod.TimingStats:
    elapsed = []
    for s in samples:
        _, _, seconds = predict(model, s.images)
        elapsed.append(seconds)
    return eval_mod.timing_report(elapsed)


# --- heatmaps -------------------------------------------------------------------


def _one_family_heatmaps(model, family, members, side, out_dir, alpha) -> list[str]:
    members = sorted(members, key=lambda s: s.sample_id)
    written = []
    branch_maps = []
    for branch in model.config.modalities:
        cams = []
        for s in members:
            x = {m: s.images[m].astype(np.float64) / 255.0 for m in model.config.modalities}
            cams.append(grad_cam(model, x, family, branch, upscale_to=side))
        cum = cumulative_cam(cams, side)
        branch_maps.append(cum)
        stem = Path(out_dir) / f"family{family}.{branch.value}"
        colored = colorize(cum)
        write_png(f"{stem}.png", colored)
        write_pgm(f"{stem}.pgm", np.clip(np.rint(cum.values * 255.0), 0, 255).astype(np.uint8))
        overlay = superimpose(ModalImage(branch, side, members[0].images[branch]), colored, alpha)
        write_png(f"{stem}.overlay.png", overlay)
        written.extend([f"{stem}.png", f"{stem}.pgm", f"{stem}.overlay.png"])
    if len(branch_maps) > 1:
        mean_map = cumulative_cam(branch_maps, side)
        stem = Path(out_dir) / f"family{family}.mean"
        write_png(f"{stem}.png", colorize(mean_map))
        write_pgm(f"{stem}.pgm", np.clip(np.rint(mean_map.values * 255.0), 0, 255).astype(np.uint8))
        written.extend([f"{stem}.png", f"{stem}.pgm"])
    return written


_HEATMAP_DATA: dict = {}


def _heatmap_pool_init(model, side, out_dir, alpha):
    _HEATMAP_DATA.update(model=model, side=side, out_dir=out_dir, alpha=alpha)


def _heatmap_pool_task(args):
    family, members = args
    return _one_family_heatmaps(
        _HEATMAP_DATA["model"], family, members,
        _HEATMAP_DATA["side"], _HEATMAP_DATA["out_dir"], _HEATMAP_DATA["alpha"],
    )


def family_heatmaps(
    model: FusionModel,
    samples,
    side: int,
    out_dir: Path,
    alpha: float = 0.5,
    jobs: int = 1,
) -> list[str]:
    """Cumulative Grad-CAM per family: one map per branch plus the
    across-branch mean, written as PNG (colorized) and PGM (raw).

    Families are independent, so they parallelize; per-family accumulation
    is content-ordered, keeping outputs identical at any jobs setting."""
    out_dir.mkdir(parents=True, exist_ok=True)
    by_family: dict[int, list] = {}
    for s in samples:
        by_family.setdefault(s.family, []).append(s)
    tasks = sorted(by_family.items())
    written: list[str] = []
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_heatmap_pool_init,
            initargs=(model, side, str(out_dir), alpha),
        ) as pool:
            for files in pool.map(_heatmap_pool_task, tasks):
                written.extend(files)
    else:
        for family, members in tasks:
            written.extend(_one_family_heatmaps(model, family, members, side, out_dir, alpha))
    return written


# --- consolidated synthetic experiment -------------------------------------------


def synthetic_experiment(cfg: PipelineConfig, jobs: int = 1) -> dict:
    """Generate the procedural corpus, run the full 19-row grid over all
    seeds, and write the consolidated report, heatmaps, features, and
    timing artifacts under the workdir."""
    from .synthetic import SyntheticSpec, generate_corpus

    layout = workdir_layout(cfg.workdir())
    for d in layout.values():
        d.mkdir(parents=True, exist_ok=True)

    syn = cfg["synthetic"]
    spec = SyntheticSpec(
        families=syn["families"],
        samples_per_family=syn["samples_per_family"],
        minority_family=syn["minority_family"],
        minority_count=syn["minority_count"],
        seed=syn["corpus_seed"],
    )
    manifest, bytes_dir, asm_dir, family_names = generate_corpus(layout["corpus"], spec)
    index = load_manifest(manifest, bytes_dir, asm_dir, family_names)
    side = syn["side"]
    render_corpus(cfg, ("gs", "eg", "sh"), jobs=jobs, index=index, side=side)

    plan = split_corpus(index, cfg["train"]["train_fraction"], cfg["train"]["split_seed"])
    train_samples = load_samples(index, layout["images"], side, ("gs", "eg", "sh"), plan.train_ids)
    test_samples = load_samples(index, layout["images"], side, ("gs", "eg", "sh"), plan.test_ids)

    grid_start = time.perf_counter()
    rows = run_grid(
        cfg, train_samples, test_samples, side, syn["epochs"], layout["checkpoints"], jobs=jobs
    )
    grid_elapsed = time.perf_counter() - grid_start

    seeds = list(cfg["train"]["seeds"])
    per_family_counts = {str(f): len(v) for f, v in index.by_family().items()}
    report = {
        "config_fingerprint": cfg.fingerprint(),
        "seeds": seeds,
        "corpus": {
            "samples": len(index),
            "per_family": dict(sorted(per_family_counts.items())),
            "train": len(train_samples),
            "test": len(test_samples),
            "side": side,
        },
        "rows": rows,
    }
    reports_dir = layout["reports"]
    (reports_dir / "synthetic_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="ascii"
    )
    (reports_dir / "synthetic_report.txt").write_text(
        render_text_report(report) + "\n", encoding="ascii"
    )

    # Timing is measured, not derived, so it lives outside the deterministic reports.
    timing_rows = []
    for row in rows:
        model = reload_row_model(
            cfg, row["modalities"], row["operator"], side, layout["checkpoints"], seeds[0]
        )
        stats = measure_timing(model, test_samples)
        timing_rows.append(
            {
                "label": row["label"],
                "branches": len(row["modalities"]),
                "mean": stats.mean,
                "p50": stats.p50,
                "p95": stats.p95,
            }
        )
    timing = {"rows": timing_rows, "grid_elapsed_seconds": grid_elapsed}
    (reports_dir / "timing.json").write_text(
        json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="ascii"
    )

    tri = reload_row_model(
        cfg, ("gs", "eg", "sh"), "concat", side, layout["checkpoints"], seeds[0]
    )
    family_heatmaps(
        tri, test_samples, side, layout["heatmaps"], alpha=cfg["report"]["alpha"], jobs=jobs
    )
    features = export_features(tri, test_samples)
    write_feature_csv(reports_dir / "features.csv", features)
    return report


def render_text_report(report: dict) -> str:
    """Plain-text tables mirroring the per-operator and per-family layout."""
    rows = report["rows"]
    by_label = {r["label"]: r for r in rows}

    def mean_metrics(row):
        return {k: v["mean"] for k, v in row["averaged"].items()}

    sections = []
    fingerprint = report["config_fingerprint"]
    sections.append(f"config fingerprint: {fingerprint}")
    sections.append(f"seeds: {report['seeds']}")
    singles = [(label, mean_metrics(by_label[label])) for label in ("GS", "EG", "SH")]
    sections.append(eval_mod.render_metrics_table(singles, "\nIndependent features"))
    for op, title in (
        ("concat", "concatenate fusion"),
        ("add", "add fusion"),
        ("avg", "avg fusion"),
        ("max", "max fusion"),
    ):
        group = [
            (r["label"], mean_metrics(r))
            for r in rows
            if r["operator"] == op
        ]
        sections.append(eval_mod.render_metrics_table(group, f"\nModels with {title}"))
    recall_table = {r["label"]: r["family_recall"] for r in rows}
    sections.append("\nPer-family detection rate (recall), averaged over seeds")
    sections.append(eval_mod.render_family_table(recall_table))
    f1_table = {r["label"]: r["family_f1"] for r in rows}
    sections.append("\nPer-family F1, averaged over seeds")
    sections.append(eval_mod.render_family_table(f1_table))
    return "\n".join(sections)


# --- real-corpus commands ---------------------------------------------------------


def _require_manifest(cfg: PipelineConfig) -> None:
    paths = cfg["paths"]
    for key in ("manifest", "bytes_root"):
        if not paths[key]:
            raise PreconditionError(f"paths.{key} is not configured")
    if not Path(paths["manifest"]).is_file():
        raise PreconditionError(f"manifest {paths['manifest']} does not exist")


def train_command(cfg: PipelineConfig) -> dict:
    """Train the configured model for every seed; one checkpoint per seed."""
    _require_manifest(cfg)
    layout = workdir_layout(cfg.workdir())
    paths = cfg["paths"]
    index = load_manifest(paths["manifest"], paths["bytes_root"], paths["asm_root"])
    side = cfg["imaging"]["side"]
    modal_names = cfg["model"]["branches"]
    plan = split_corpus(index, cfg["train"]["train_fraction"], cfg["train"]["split_seed"])
    train_samples = load_samples(index, layout["images"], side, modal_names, plan.train_ids)
    test_samples = load_samples(index, layout["images"], side, modal_names, plan.test_ids)
    layout["checkpoints"].mkdir(parents=True, exist_ok=True)
    layout["reports"].mkdir(parents=True, exist_ok=True)

    operator = cfg["model"]["fusion"]
    results = []
    for seed in cfg["train"]["seeds"]:
        ckpt = layout["checkpoints"] / f"{row_stem(modal_names, operator)}.seed{seed}.ckpt"
        results.append(
            run_row_seed(
                modal_names, operator, seed, train_samples, test_samples, side, cfg,
                cfg["train"]["epochs"], checkpoint_path=ckpt,
            )
        )
    summary = {
        "config_fingerprint": cfg.fingerprint(),
        "label": results[0]["label"],
        "seeds": list(cfg["train"]["seeds"]),
        "per_seed": [{"seed": r["seed"], **r["metrics"], "final": r["final"]} for r in results],
        "averaged": eval_mod.average_over_seeds([r["metrics"] for r in results]),
    }
    (layout["reports"] / "train_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="ascii"
    )
    return summary


def _eval_context(cfg: PipelineConfig):
    _require_manifest(cfg)
    layout = workdir_layout(cfg.workdir())
    paths = cfg["paths"]
    index = load_manifest(paths["manifest"], paths["bytes_root"], paths["asm_root"])
    side = cfg["imaging"]["side"]
    modal_names = cfg["model"]["branches"]
    plan = split_corpus(index, cfg["train"]["train_fraction"], cfg["train"]["split_seed"])
    test_samples = load_samples(index, layout["images"], side, modal_names, plan.test_ids)
    return layout, index, side, modal_names, test_samples


def eval_command(cfg: PipelineConfig) -> dict:
    """Evaluate the trained checkpoints on the held-out split."""
    layout, index, side, modal_names, test_samples = _eval_context(cfg)
    operator = cfg["model"]["fusion"]
    seeds = list(cfg["train"]["seeds"])
    per_seed = []
    family_recall = []
    family_f1 = []
    label = None
    for seed in seeds:
        model = reload_row_model(cfg, modal_names, operator, side, layout["checkpoints"], seed)
        label = model.config.label()
        pairs = evaluate_predictions(model, test_samples)
        cm = eval_mod.confusion(pairs, classes=model.config.classes)
        macro = eval_mod.metrics(cm, "macro")
        weighted = eval_mod.metrics(cm, "weighted")
        per_seed.append({"seed": seed, **eval_mod.metrics_as_dict(macro, weighted)})
        family_recall.append([c.recall if c.support > 0 else None for c in macro.per_class])
        family_f1.append([c.f1 if c.support > 0 else None for c in macro.per_class])
    metric_dicts = [{k: v for k, v in d.items() if k != "seed"} for d in per_seed]
    report = {
        "config_fingerprint": cfg.fingerprint(),
        "label": label,
        "seeds": seeds,
        "test_samples": len(test_samples),
        "per_seed": per_seed,
        "averaged": eval_mod.average_over_seeds(metric_dicts),
        "family_recall": _average_family(family_recall),
        "family_f1": _average_family(family_f1),
    }
    layout["reports"].mkdir(parents=True, exist_ok=True)
    (layout["reports"] / "metrics.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="ascii"
    )
    table = {label: report["family_recall"]}
    text = eval_mod.render_metrics_table(
        [(label, {k: v["mean"] for k, v in report["averaged"].items()})], "Held-out metrics"
    )
    text += "\n\nPer-family detection rate\n" + eval_mod.render_family_table(table)
    (layout["reports"] / "metrics.txt").write_text(text + "\n", encoding="ascii")

    model = reload_row_model(cfg, modal_names, operator, side, layout["checkpoints"], seeds[0])
    stats = measure_timing(model, test_samples)
    timing = {
        "rows": [
            {
                "label": label,
                "branches": len(modal_names),
                "mean": stats.mean,
                "p50": stats.p50,
                "p95": stats.p95,
            }
        ]
    }
    (layout["reports"] / "timing.json").write_text(
        json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="ascii"
    )
    return report


def gradcam_command(cfg: PipelineConfig) -> list[str]:
    """Cumulative per-family heatmaps for the first-seed checkpoint."""
    layout, index, side, modal_names, test_samples = _eval_context(cfg)
    model = reload_row_model(
        cfg, modal_names, cfg["model"]["fusion"], side, layout["checkpoints"],
        cfg["train"]["seeds"][0],
    )
    return family_heatmaps(
        model, test_samples, side, layout["heatmaps"],
        alpha=cfg["report"]["alpha"], jobs=cfg["jobs"],
    )


def export_command(cfg: PipelineConfig) -> Path:
    """Penultimate feature vectors of the held-out split, as CSV."""
    layout, index, side, modal_names, test_samples = _eval_context(cfg)
    model = reload_row_model(
        cfg, modal_names, cfg["model"]["fusion"], side, layout["checkpoints"],
        cfg["train"]["seeds"][0],
    )
    rows = export_features(model, test_samples)
    layout["reports"].mkdir(parents=True, exist_ok=True)
    out = layout["reports"] / "features.csv"
    write_feature_csv(out, rows)
    return out
