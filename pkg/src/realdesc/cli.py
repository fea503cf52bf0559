"""Command-line surface.

Commands: describe, strip-names, verify, eval, train, pretrain-extras,
eval-paco, probe, report. Exit codes: 0 success, 2 validation error,
3 external-service error, 4 data error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .errors import DataError, ExternalServiceError, RealdescError, ValidationError

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_EXTERNAL = 3
EXIT_DATA = 4


def _exit_code(exc: RealdescError) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, ExternalServiceError):
        return EXIT_EXTERNAL
    if isinstance(exc, DataError):
        return EXIT_DATA
    return 1


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RealdescError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))
    return wrapper


def _load_backbone(identifier: str):
    from .backbone import load_checkpoint
    return load_checkpoint(identifier)


def _dataset_source(dataset: str, root: str | None):
    from .datasets import BENCHMARKS, ImageFolderSource, load_benchmark
    if dataset == "imagefolder":
        if not root:
            raise ValidationError("--root is required for --dataset imagefolder")
        return ImageFolderSource(root)
    if dataset in BENCHMARKS:
        if not root:
            raise ValidationError(f"--root is required for benchmark {dataset}")
        return load_benchmark(dataset, root)
    raise ValidationError(
        f"unknown dataset {dataset!r}; valid names: {', '.join(sorted(BENCHMARKS))}, imagefolder")


def _print_plan(plan: dict) -> None:
    click.echo(json.dumps({"dry_run": True, "plan": plan}, indent=2, default=str))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool):
    """Real zero-shot classification by description."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


# ------------------------------------------------------------------ describe

@main.command()
@click.option("--dataset", required=True, help="Benchmark name or 'custom'.")
@click.option("--style", type=click.Choice(["oxford", "columbia"]), default="oxford", show_default=True)
@click.option("--k", type=int, default=8, show_default=True, help="Sentences per class.")
@click.option("--provider", type=click.Choice(["fixtures", "remote"]), default="fixtures", show_default=True)
@click.option("--classes-file", type=click.Path(exists=True), default=None,
              help="JSON list of class names (required for --dataset custom).")
@click.option("--placeholder", default=None, help="Super-category for custom classes.")
@click.option("--out", type=click.Path(), default="descriptions", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dry-run", is_flag=True)
@handle_errors
def describe(dataset, style, k, provider, classes_file, placeholder, out, seed, dry_run):
    """Generate per-class descriptions and their name-free variants."""
    from .datasets import BENCHMARKS, attribute_table, class_list, supercategory_map
    from .descriptions import (FixtureProvider, RemoteLLMProvider, generate_descriptions,
                               strip_names, verify_name_free)

    if dataset in BENCHMARKS:
        classes = class_list(dataset)
        placeholders = supercategory_map(dataset)
        attrs = attribute_table(dataset)
    elif classes_file:
        classes = json.loads(Path(classes_file).read_text(encoding="utf-8"))
        placeholders = placeholder or "object"
        attrs = None
    else:
        raise ValidationError("unknown dataset; pass a benchmark name or --classes-file for custom classes")

    out_dir = Path(out)
    named_path = out_dir / f"{dataset}_{style}.raw.json"
    filtered_path = out_dir / f"{dataset}_{style}.json"
    plan = {"dataset": dataset, "style": style, "k": k, "provider": provider,
            "n_classes": len(classes), "named_file": named_path, "filtered_file": filtered_path}
    if dry_run:
        _print_plan(plan)
        return

    if provider == "remote":
        gen = RemoteLLMProvider(audit_log=out_dir / "llm_audit.jsonl")
    else:
        gen = FixtureProvider(attributes=attrs, audit_log=out_dir / "fixtures_audit.jsonl")
    file = generate_descriptions(classes, style, k, gen, placeholders=placeholders,
                                 dataset=dataset, checkpoint_path=out_dir / f"{dataset}_{style}.partial.json")
    file.save(named_path)
    strip_names(file)
    file.save(filtered_path)
    report = verify_name_free(file)
    click.echo(f"wrote {named_path} and {filtered_path}")
    click.echo(report.summary())


@main.command("strip-names")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dry-run", is_flag=True)
@handle_errors
def strip_names_cmd(in_path, out_path, dry_run):
    """Fill name-free sentences for an existing description file."""
    from .descriptions import DescriptionFile, strip_names, verify_name_free

    if dry_run:
        _print_plan({"in": in_path, "out": out_path})
        return
    file = DescriptionFile.load(in_path)
    strip_names(file)
    file.save(out_path)
    click.echo(verify_name_free(file).summary())


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@handle_errors
def verify(in_path):
    """Certify that a description file contains no class-name residue."""
    from .descriptions import DescriptionFile, verify_name_free

    report = verify_name_free(DescriptionFile.load(in_path))
    click.echo(report.summary())
    for hit in report.residuals[:20]:
        click.echo(f"  residual: {hit}")
    if not report.certified:
        raise DataError(f"{len(report.residuals)} residual class-name hits")


# ---------------------------------------------------------------------- eval

@main.command("eval")
@click.option("--dataset", required=True)
@click.option("--root", type=click.Path(), default=None, help="Dataset root directory.")
@click.option("--mode", type=click.Choice(["only_name", "with_name", "no_name", "all"]),
              default="no_name", show_default=True)
@click.option("--backbone", default="openai/clip-vit-base-patch32", show_default=True)
@click.option("--descriptions", "descriptions_path", type=click.Path(), default=None)
@click.option("--style", default=None, help="Recorded in the report; defaults to the file's style.")
@click.option("--multires/--no-multires", default=False, show_default=True)
@click.option("--multires-scale", type=int, default=2, show_default=True)
@click.option("--extras", type=click.Path(exists=True), default=None,
              help="Trained extra-layer checkpoint for --multires.")
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--out", type=click.Path(), default="reports", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dry-run", is_flag=True)
@handle_errors
def eval_cmd(dataset, root, mode, backbone, descriptions_path, style, multires,
             multires_scale, extras, batch_size, out, seed, dry_run):
    """Zero-shot evaluation; emits JSON and a CSV row per run."""
    import csv

    from .cache import EmbeddingCache, default_cache_root
    from .descriptions import ClassDescriptions, DescriptionFile
    from .zeroshot import EVAL_MODES, build_prototypes, compare_modes, evaluate_dataset

    plan = {"dataset": dataset, "mode": mode, "backbone": backbone,
            "descriptions": descriptions_path, "multires": multires, "out": out}
    if dry_run:
        _print_plan(plan)
        return

    source = _dataset_source(dataset, root)
    handle = _load_backbone(backbone)

    if descriptions_path:
        file = DescriptionFile.load(descriptions_path)
    elif mode == "only_name":
        file = DescriptionFile(
            metadata={"dataset": dataset, "style": style or "oxford", "generator": "template-only"},
            classes={
                name: ClassDescriptions(class_name=name, placeholder="object",
                                        style=style or "oxford", sentences=[name],
                                        name_free_sentences=[name])
                for name in source.classes
            })
    else:
        raise ValidationError(f"mode {mode!r} needs --descriptions")

    encode_fn = None
    multires_cfg = None
    if multires:
        import torch

        from .multires import MultiResConfig, encode_multires, init_extra_layer, load_extra_layer

        multires_cfg = MultiResConfig(base_side=handle.image_size, scale=multires_scale)
        state = (load_extra_layer(extras, handle, multires_cfg) if extras
                 else init_extra_layer(handle, multires_cfg))

        def encode_fn(images):
            return torch.stack([
                encode_multires(handle, state, img, multires_cfg) for img in images
            ]).detach().cpu().numpy()

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = EmbeddingCache(default_cache_root())

    def run_one(m):
        index = build_prototypes(file, m, handle, cache_dir=out_dir / "prototype_cache")
        report = evaluate_dataset(source, index, handle, batch_size=batch_size,
                                  cache=None if encode_fn else cache, encode_fn=encode_fn)
        report.meta.update({"dataset": dataset, "style": file.style, "multires": multires})
        report.save(out_dir / f"{dataset}_{m}_report.json")
        click.echo(f"{dataset} {m}: top1={report.top1:.4f} top5={report.top5:.4f} (n={report.n_images})")
        return report

    csv_path = out_dir / "results.csv"
    new_file = not csv_path.exists()
    with csv_path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["dataset", "backbone", "style", "mode", "multires", "top1", "top5", "n_images"])
        if mode == "all":
            gap = compare_modes(source, file, handle, batch_size=batch_size, cache=cache)
            for m in EVAL_MODES:
                writer.writerow([dataset, backbone, file.style, m, multires,
                                 f"{getattr(gap, m):.4f}", "", gap.n_images])
            click.echo(f"gap (with - no): {gap.gap:.4f}")
            (out_dir / f"{dataset}_gap_report.json").write_text(
                json.dumps(gap.to_dict(), indent=2) + "\n", encoding="utf-8")
        else:
            report = run_one(mode)
            writer.writerow([dataset, backbone, file.style, mode, multires,
                             f"{report.top1:.4f}", f"{report.top5:.4f}", report.n_images])


# --------------------------------------------------------------------- train

@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--backbone", default=None)
@click.option("--images-root", type=click.Path(), default=None, help="Image-folder training images.")
@click.option("--descriptions", "descriptions_path", type=click.Path(), default=None)
@click.option("--n-classes", type=int, default=50, show_default=True)
@click.option("--k-images", type=int, default=5, show_default=True)
@click.option("--n-sentences", type=int, default=2, show_default=True)
@click.option("--exclude-benchmarks/--no-exclude-benchmarks", default=True, show_default=True)
@click.option("--lr", type=float, default=None)
@click.option("--optimizer", type=click.Choice(["adam", "adamw"]), default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--warmup-steps", type=int, default=None)
@click.option("--total-steps", type=int, default=None)
@click.option("--freeze-image", default=None, help="none | all | integer k for last-k layers.")
@click.option("--freeze-text/--train-text", "text_frozen", default=False, show_default=True)
@click.option("--multires/--no-multires", default=False, show_default=True)
@click.option("--out", type=click.Path(), default="runs/finetune", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--dry-run", is_flag=True)
@handle_errors
def train(config_path, backbone, images_root, descriptions_path, n_classes, k_images,
          n_sentences, exclude_benchmarks, lr, optimizer, weight_decay, batch_size,
          warmup_steps, total_steps, freeze_image, text_frozen, multires, out, seed, dry_run):
    """Contrastive fine-tuning on curated name-free pairs."""
    from .backbone import FreezePolicy
    from .config import RunConfig
    from .datasets import ImageFolderSource, all_benchmark_class_names, load_image
    from .descriptions import DescriptionFile
    from .training import CurationSpec, ScheduleSpec, curate, finetune

    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    cfg = cfg.merged(backbone=backbone, seed=seed)
    schedule_overrides = {k: v for k, v in {
        "lr": lr, "optimizer": optimizer, "weight_decay": weight_decay,
        "batch_size": batch_size, "warmup_steps": warmup_steps, "total_steps": total_steps,
    }.items() if v is not None}
    schedule_kwargs = {**cfg.schedule, **schedule_overrides}
    if "seed" not in schedule_kwargs:
        schedule_kwargs["seed"] = cfg.seed
    schedule = ScheduleSpec(**schedule_kwargs)

    if freeze_image is not None:
        cfg.freeze["image_trainable_layers"] = (
            freeze_image if freeze_image in ("none", "all") else int(freeze_image))
    cfg.freeze["text_encoder_trainable"] = not text_frozen
    if multires:
        cfg.freeze["extras_trainable"] = True
        cfg.multires_enabled = True
    freeze = FreezePolicy(**cfg.freeze)

    images_root = images_root or cfg.paths.get("images_root")
    descriptions_path = descriptions_path or cfg.paths.get("descriptions")
    if not images_root or not descriptions_path:
        raise ValidationError("training needs --images-root and --descriptions (or config paths)")

    plan = {"backbone": cfg.backbone, "schedule": schedule.to_dict(),
            "freeze": cfg.freeze, "multires": cfg.multires_enabled,
            "images_root": images_root, "descriptions": descriptions_path,
            "curation": {"n_classes": n_classes, "k_images": k_images, "n_sentences": n_sentences},
            "out": out}
    if dry_run:
        _print_plan(plan)
        return

    handle = _load_backbone(cfg.backbone)
    source = ImageFolderSource(images_root)
    descriptions = DescriptionFile.load(descriptions_path)
    excluded = all_benchmark_class_names() if exclude_benchmarks else frozenset()
    spec = CurationSpec(n_classes=n_classes, k_images=k_images, n_sentences=n_sentences,
                        excluded_classes=frozenset(excluded), seed=cfg.seed)
    manifest = curate(spec, descriptions, source)

    extras = None
    multires_cfg = None
    if cfg.multires_enabled:
        from .multires import MultiResConfig, init_extra_layer
        multires_cfg = MultiResConfig(base_side=handle.image_size, **cfg.multires)
        extras = init_extra_layer(handle, multires_cfg)

    result = finetune(handle, extras, manifest, schedule, freeze,
                      image_loader=load_image, out_dir=out, multires_cfg=multires_cfg)
    click.echo(f"run complete: {result['out_dir']} (final loss {result['losses'][-1]:.4f})")


@main.command("pretrain-extras")
@click.option("--backbone", required=True)
@click.option("--captions", "captions_path", required=True, type=click.Path(exists=True),
              help="JSONL of {\"image_ref\": ..., \"caption\": ...}.")
@click.option("--scale", type=int, default=2, show_default=True)
@click.option("--alpha-init", type=float, default=0.01, show_default=True)
@click.option("--alpha-lr", type=float, default=1e-4, show_default=True)
@click.option("--lr", type=float, default=1e-5, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--out", type=click.Path(), default="runs/pretrain_extras", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dry-run", is_flag=True)
@handle_errors
def pretrain_extras_cmd(backbone, captions_path, scale, alpha_init, alpha_lr, lr,
                        batch_size, steps, out, seed, dry_run):
    """Warm up the multi-resolution extras on an image-caption corpus."""
    from .datasets import load_image
    from .multires import MultiResConfig, init_extra_layer, pretrain_extras
    from .training import ScheduleSpec

    plan = {"backbone": backbone, "captions": captions_path, "scale": scale,
            "steps": steps, "out": out}
    if dry_run:
        _print_plan(plan)
        return

    handle = _load_backbone(backbone)
    cfg = MultiResConfig(base_side=handle.image_size, scale=scale,
                         alpha_init=alpha_init, alpha_lr=alpha_lr)
    pairs = []
    with open(captions_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entry = json.loads(line)
                pairs.append((load_image(entry["image_ref"]), entry["caption"]))
    schedule = ScheduleSpec(lr=lr, batch_size=batch_size, warmup_steps=0,
                            total_steps=steps, seed=seed)
    state = init_extra_layer(handle, cfg)
    result = pretrain_extras(state, handle, pairs, schedule, cfg=cfg, out_dir=out)
    click.echo(f"pretrained extras: alpha={result['alpha']:.4f}, "
               f"loss {result['losses'][0]:.4f} -> {result['losses'][-1]:.4f}")


# --------------------------------------------------------------------- evals

@main.command("eval-paco")
@click.option("--records", "records_path", type=click.Path(exists=True), default=None,
              help="JSONL of prepared records.")
@click.option("--annotations", type=click.Path(exists=True), default=None,
              help="Standard PACO JSON to ingest instead of --records.")
@click.option("--protocol", type=click.Choice(["filter_multival", "topk_decompose"]),
              default="filter_multival", show_default=True)
@click.option("--backbone", required=True)
@click.option("--images-root", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default="reports", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dry-run", is_flag=True)
@handle_errors
def eval_paco(records_path, annotations, protocol, backbone, images_root, out, seed, dry_run):
    """Attribute-of-parts accuracy under either protocol."""
    from .evals import build_clip_scorer, load_paco_annotations, load_paco_records, paco_evaluate

    if not records_path and not annotations:
        raise ValidationError("pass --records or --annotations")
    plan = {"records": records_path, "annotations": annotations, "protocol": protocol,
            "backbone": backbone, "out": out}
    if dry_run:
        _print_plan(plan)
        return

    records = (load_paco_records(records_path) if records_path
               else load_paco_annotations(annotations))
    handle = _load_backbone(backbone)

    def loader(ref: str):
        from .datasets import load_image
        path = Path(images_root) / ref if images_root else Path(ref)
        return load_image(str(path))

    scorer = build_clip_scorer(handle, image_loader=loader)
    report = paco_evaluate(records, scorer, protocol=protocol)
    out_dir = Path(out)
    report.save_csv(out_dir / f"paco_{protocol}.csv")
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command()
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--backbone", required=True)
@click.option("--images-root", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default="reports", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dry-run", is_flag=True)
@handle_errors
def probe(records_path, backbone, images_root, out, seed, dry_run):
    """Positive-vs-five-negatives attribute probe; Table-shaped CSV output."""
    from .evals import build_clip_scorer, load_probe_records, probe_evaluate

    plan = {"records": records_path, "backbone": backbone, "out": out}
    if dry_run:
        _print_plan(plan)
        return

    records = load_probe_records(records_path)
    handle = _load_backbone(backbone)

    def loader(ref: str):
        from .datasets import load_image
        path = Path(images_root) / ref if images_root else Path(ref)
        return load_image(str(path))

    scorer = build_clip_scorer(handle, image_loader=loader)
    report = probe_evaluate(records, scorer)
    out_dir = Path(out)
    csv_path = report.save_csv(out_dir / "probe_results.csv")
    click.echo(f"wrote {csv_path}; overall accuracy {report.overall:.4f}")


@main.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@handle_errors
def report(run_dir):
    """Summarize a run directory (config, loss curve, reports)."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if config_path.exists():
        click.echo(config_path.read_text(encoding="utf-8").strip())
    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        lines = metrics_path.read_text(encoding="utf-8").strip().splitlines()
        if len(lines) > 1:
            first = lines[1].split(",")
            last = lines[-1].split(",")
            click.echo(f"steps: {len(lines) - 1}, loss {first[1]} -> {last[1]}")
    for report_file in sorted(run_dir.glob("*_report.json")):
        payload = json.loads(report_file.read_text(encoding="utf-8"))
        click.echo(f"{report_file.name}: top1={payload.get('top1')} top5={payload.get('top5')}")


if __name__ == "__main__":
    main()
