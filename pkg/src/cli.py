"""
phaseprof CLI

Command-line entry point for the cloud-phase profile pipeline:
- collocate  imager scenes + profiler tracks -> labelled patches (CPTX)
- synth      synthetic labelled patches with dense truth
- train      masked training -> checkpoint (CPCK) + epoch log
- predict    checkpoint + patches -> patches with predicted volumes
- eval       predicted patches -> metrics, tables, strips
- report     several eval outputs -> combined tables and chart
- stats      dataset statistics

Exit codes: 0 success, 1 usage/IO/validation error, 2 degenerate metric,
3 numerical failure.
"""

import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import click
from rich.console import Console
from rich.panel import Panel

from config import load_settings, worker_threads
from services.collocation_service import collocate
from services.dataset_service import summarize_patches
from services.evaluation_service import (
    METRICS_FILE,
    evaluate_patches,
    load_report,
    phase_strips,
    render_report,
    save_report,
    table1,
    table2,
)
from services.model_service import ModelConfig
from services.synth_service import make_patches, shots_from_track, synth_scenes
from services.training_service import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    EPOCH_LOG_FILE,
    TrainConfig,
    load_checkpoint,
    predict,
    split_dataset,
    train,
    with_predictions,
)
from utils.containers import LabeledPatch, read_patches, write_patches
from utils.io_helpers import OutputTracker, atomic_write
from utils.logging_config import LogContext, init_logging
from utils.scene_io import read_scene_dir, read_tracks, write_scene, write_tracks
from utils.validation import PhaseProfError, ValidationError
from visualization import channel_density_figure, frame_table, summary_table, vertical_coverage_figure, write_html

__version__ = "0.1.0"

logger = logging.getLogger(__name__)
console = Console()
err_console = Console(stderr=True)

MANIFEST_FILE = "manifest.json"
SPLIT_FILE = "split.json"


# ============================================
# RUN MANIFEST
# ============================================

def run_key(command: str, seed: Optional[int], config_path: Optional[str], inputs: dict[str, str], version: str) -> str:
    """Run id: digest of everything that determines the run's outputs."""
    identity = json.dumps([command, seed, config_path, sorted(inputs.items()), version])
    return hashlib.sha256(identity.encode("utf-8")).hexdigest()[:12]


@dataclass
class RunManifest:
    command: str
    seed: Optional[int] = None
    config_path: Optional[str] = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    version: str = __version__
    run_id: str = ""
    started_at: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    finished_at: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.run_id:
            self.run_id = run_key(self.command, self.seed, self.config_path, self.inputs, self.version)

    def write(self, path: Path) -> Path:
        self.finished_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        with atomic_write(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, default=str)
        return path


def manifest_path(out: Path) -> Path:
    """Directory outputs hold manifest.json; file outputs get a sibling <name>.manifest.json."""
    if out.suffix:
        return out.with_name(f"{out.name}.manifest.json")
    return out / MANIFEST_FILE


class RunContext:
    """Per-invocation state shared by the commands."""

    def __init__(self, settings: dict, settings_path: Optional[str]):
        self.settings = settings
        self.settings_path = settings_path
        self.tracker = OutputTracker()
        self.manifest: Optional[RunManifest] = None

    def begin(self, command: str, seed: Optional[int] = None, **inputs: Any) -> RunManifest:
        self.manifest = RunManifest(
            command=command,
            seed=seed,
            config_path=self.settings_path,
            inputs={k: str(v) for k, v in inputs.items() if v is not None},
        )
        LogContext.set(command=command, run_id=self.manifest.run_id, seed=seed)
        return self.manifest

    def output(self, path: Path) -> Path:
        self.tracker.add(path)
        if self.manifest is not None:
            self.manifest.outputs.append(str(path))
        return path

    def finish(self, out: Path, **summary: Any) -> Path:
        assert self.manifest is not None
        self.manifest.summary.update(summary)
        path = manifest_path(out)
        self.tracker.add(path)
        return self.manifest.write(path)


# ============================================
# EXIT-CODE HANDLING
# ============================================

class PhaseProfGroup(click.Group):
    """Maps library errors and command results onto the documented exit codes."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except PhaseProfError as e:
            self._rollback(ctx)
            err_console.print(f"[red]Error:[/red] {e}")
            logger.error(f"{type(e).__name__}: {e}")
            return e.exit_code
        except OSError as e:
            self._rollback(ctx)
            err_console.print(f"[red]I/O error:[/red] {e}")
            logger.error(f"I/O error: {e}")
            return 1

    @staticmethod
    def _rollback(ctx: click.Context) -> None:
        run = ctx.find_object(RunContext)
        if run is not None:
            run.tracker.rollback()

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):  # type: ignore[override]
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            code = 1
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = 1
        else:
            code = rv if isinstance(rv, int) else 0
        if standalone_mode:
            sys.exit(code)
        return code


def _opt(value: Any, default: Any) -> Any:
    return default if value is None else value


# ============================================
# GROUP
# ============================================

@click.group(cls=PhaseProfGroup)
@click.version_option(__version__, prog_name="phaseprof")
@click.option("--settings", "settings_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="User settings YAML merged over the packaged defaults.")
@click.option("--log-dir", type=click.Path(file_okay=False), default=None, help="Write rotating log files here.")
@click.option("--json-logs", is_flag=True, help="JSON format for file logs.")
@click.option("-v", "--verbose", is_flag=True, help="DEBUG logging.")
@click.pass_context
def cli(ctx: click.Context, settings_path: Optional[str], log_dir: Optional[str], json_logs: bool, verbose: bool):
    """Cloud phase profile reconstruction from imager patches."""
    settings = load_settings(settings_path)
    log_settings = settings.get("logging", {})
    init_logging(
        level="DEBUG" if verbose else log_settings.get("level"),
        json_logs=json_logs or bool(log_settings.get("json_logs")),
        log_dir=Path(log_dir) if log_dir else (Path(log_settings["log_dir"]) if log_settings.get("log_dir") else None),
    )
    ctx.obj = RunContext(settings, settings_path)


# ============================================
# DATA COMMANDS
# ============================================

@cli.command("collocate")
@click.option("--scenes", "scenes_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of imager scene sidecars (.json + .bin).")
@click.option("--tracks", "tracks_file", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Profiler track CSV.")
@click.option("--window-min", type=float, default=None, help="Time window in minutes (default 5).")
@click.option("--patch", type=int, default=None, help="Patch size in pixels (default 128).")
@click.option("--stride", type=int, default=None, help="Along-track stride; default = patch (no overlap).")
@click.option("--region", default=None, help="Preset name or lon_min,lon_max,lat_min,lat_max.")
@click.option("--include-sat-zenith", is_flag=True, help="Add cos(satellite zenith) as a fifth aux plane.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output CPTX file.")
@click.pass_obj
def cmd_collocate(run: RunContext, scenes_dir, tracks_file, window_min, patch, stride, region, include_sat_zenith, out):
    """
    Match profiler shots to imager pixels and cut labelled patches.

    Example:
        phaseprof collocate --scenes data/ahi --tracks data/tracks.csv --out patches.cptx
    """
    cfg = run.settings.get("collocation", {})
    window_s = (window_min * 60.0) if window_min is not None else float(cfg.get("window_s", 300))
    if window_s < 0:
        raise ValidationError("window must be >= 0", field="window_min", value=window_min)
    region_value: Any = _opt(region, cfg.get("region"))
    if isinstance(region_value, str) and "," in region_value:
        region_value = [float(v) for v in region_value.split(",")]
    if isinstance(region_value, str) and region_value in cfg.get("regions", {}):
        region_value = cfg["regions"][region_value]

    run.begin("collocate", scenes=scenes_dir, tracks=tracks_file)
    scenes = read_scene_dir(scenes_dir)
    shots = read_tracks(tracks_file)
    patches, summary = collocate(
        scenes,
        shots,
        window_s=window_s,
        patch=int(_opt(patch, cfg.get("patch", 128))),
        stride=_opt(stride, cfg.get("stride")),
        region=region_value,
        include_sat_zenith=include_sat_zenith or bool(cfg.get("include_sat_zenith", False)),
        threads=worker_threads(run.settings),
    )

    out_path = run.output(Path(out))
    write_patches(out_path, patches)
    run.finish(out_path, **summary.to_dict())

    console.print(summary_table(summary.to_dict(), title="Collocation"))
    if not patches:
        err_console.print("[yellow]Warning:[/yellow] no patches produced (no shot matched in time and space)")
    console.print(f"[green]Wrote {len(patches)} patches[/green] to {out_path}: "
                  f"{summary.matched_pixels} matched pixels, mask density {summary.mask_density:.6f}")
    return 0


@cli.command("synth")
@click.option("--scenes", "n", type=int, required=True, help="Number of synthetic scenes/patches.")
@click.option("--size", type=int, default=None, help="Scene size in pixels (default 128).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-dense", is_flag=True, help="Omit the dense truth volumes.")
@click.option("--export-dir", type=click.Path(file_okay=False), default=None,
              help="Also write the raw scenes and a tracks.csv for the collocate command.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output CPTX file.")
@click.pass_obj
def cmd_synth(run: RunContext, n, size, seed, no_dense, export_dir, out):
    """Generate labelled synthetic patches (deterministic in --seed)."""
    if n < 0:
        raise ValidationError("scene count must be >= 0", field="scenes", value=n)
    cfg = run.settings.get("synth", {})
    size = int(_opt(size, cfg.get("size", 128)))
    options = dict(
        cloud_count=tuple(cfg.get("cloud_count", (4, 12))),
        fractions=tuple(cfg.get("fractions", (0.893, 0.057, 0.039, 0.012))),
        noise_sigma=float(cfg.get("noise_sigma", 0.5)),
    )
    run.begin("synth", seed=seed, scenes=n, size=size, dense=not no_dense)

    patches = make_patches(n, size=size, seed=seed, with_dense=not no_dense and cfg.get("with_dense", True), **options)
    out_path = run.output(Path(out))
    write_patches(out_path, patches)

    if export_dir is not None:
        export = Path(export_dir)
        shots = []
        for scene, dense, track in synth_scenes(n, size=size, seed=seed, **options):
            run.output(write_scene(export, scene))
            run.output(export / f"{scene.name}.bin")
            shots.extend(shots_from_track(scene, dense, track))
        run.output(write_tracks(export / "tracks.csv", shots))

    density = sum(p.mask_density for p in patches) / len(patches) if patches else 0.0
    run.finish(out_path, patches=len(patches), size=size, mask_density=density)
    console.print(f"[green]Wrote {len(patches)} synthetic patches[/green] to {out_path}")
    return 0


# ============================================
# MODEL COMMANDS
# ============================================

@cli.command("train")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="CPTX patches.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Model config YAML (flat, or nested under 'model:').")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Checkpoint directory.")
@click.option("--architecture", type=click.Choice(["sgmagnet", "baseline"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None, help="Initial learning rate.")
@click.option("--seed", type=int, default=None)
@click.option("--dense-labels", is_flag=True, help="Train on dense synthetic truth instead of track labels.")
@click.pass_obj
def cmd_train(run: RunContext, data, config_path, out, architecture, epochs, batch_size, lr, seed, dense_labels):
    """Train a model on the train split; keeps the best-validation checkpoint."""
    model_config = ModelConfig.load(config_path) if config_path else ModelConfig.from_mapping(run.settings["model"])
    if architecture is not None:
        model_config = ModelConfig.from_mapping({**model_config.to_mapping(), "architecture": architecture})

    overrides = {"epochs": epochs, "batch_size": batch_size, "lr0": lr, "seed": seed}
    mapping = {**run.settings.get("training", {}), **{k: v for k, v in overrides.items() if v is not None}}
    if dense_labels:
        mapping["dense_labels"] = True
    train_config = TrainConfig.from_mapping(mapping)

    run.begin("train", seed=train_config.seed, data=data, config=config_path)
    if config_path:
        run.manifest.config_path = config_path

    patches = read_patches(data)
    train_idx, val_idx, test_idx = split_dataset(list(range(len(patches))), train_config.split, train_config.seed)
    out_dir = Path(out)
    for name in (CHECKPOINT_FILE, CONFIG_FILE, EPOCH_LOG_FILE):
        run.output(out_dir / name)

    result = train(
        model_config,
        train_config,
        [patches[i] for i in train_idx],
        [patches[i] for i in val_idx],
        out_dir=out_dir,
    )

    split_path = run.output(out_dir / SPLIT_FILE)
    with atomic_write(split_path, "w", encoding="utf-8") as f:
        json.dump({"train": train_idx, "val": val_idx, "test": test_idx, "seed": train_config.seed}, f)

    run.finish(out_dir, **result.to_dict(), train_config=train_config.to_mapping(), model=model_config.to_mapping())
    console.print(frame_table(result.history.tail(10), title="Training (last epochs)", precision=6))
    console.print(Panel(f"best epoch {result.best_epoch}, loss {result.best_loss:.6f}\ncheckpoint {result.checkpoint}",
                        title="Training complete", border_style="green"))
    return 0


def _subset(patches: list[LabeledPatch], ckpt: Path, subset: str) -> list[LabeledPatch]:
    if subset == "all":
        return patches
    split_path = (ckpt if ckpt.is_dir() else ckpt.parent) / SPLIT_FILE
    if not split_path.exists():
        raise ValidationError(f"--subset {subset} needs {split_path}", field="subset", value=subset)
    indices = json.loads(split_path.read_text(encoding="utf-8"))[subset]
    if any(i >= len(patches) for i in indices):
        raise ValidationError("split indices do not fit this data file", field="subset", value=subset)
    return [patches[i] for i in indices]


@cli.command("predict")
@click.option("--ckpt", required=True, type=click.Path(exists=True), help="Checkpoint directory or .cpck file.")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="CPTX patches.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output CPTX with predictions.")
@click.option("--subset", type=click.Choice(["all", "train", "val", "test"]), default="all", show_default=True,
              help="Restrict to a split recorded at training time.")
@click.option("--batch-size", type=int, default=None)
@click.pass_obj
def cmd_predict(run: RunContext, ckpt, data, out, subset, batch_size):
    """Attach predicted class volumes (u8) to every patch."""
    run.begin("predict", ckpt=ckpt, data=data)
    config, params, _ = load_checkpoint(ckpt)
    patches = _subset(read_patches(data), Path(ckpt), subset)
    batch = int(_opt(batch_size, run.settings.get("training", {}).get("batch_size", 4)))
    predicted = with_predictions(patches, predict(params, config, patches, batch))

    out_path = run.output(Path(out))
    write_patches(out_path, predicted)
    run.finish(out_path, patches=len(predicted), subset=subset, architecture=config.architecture)
    console.print(f"[green]Wrote {len(predicted)} predicted patches[/green] to {out_path}")
    return 0


# ============================================
# EVALUATION COMMANDS
# ============================================

def _attach_truth(predicted: list[LabeledPatch], truth: list[LabeledPatch]) -> list[LabeledPatch]:
    by_key = {(p.timestamp, p.origin): p for p in truth}
    merged = []
    for p in predicted:
        t = by_key.get((p.timestamp, p.origin))
        if t is None:
            raise ValidationError(f"no truth patch for timestamp {p.timestamp} origin {p.origin}", field="data")
        merged.append(LabeledPatch(
            channels=p.channels, aux=p.aux, labels=t.labels, mask=t.mask, dense=t.dense,
            prediction=p.prediction, timestamp=p.timestamp, origin=p.origin,
        ))
    return merged


@cli.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True, dir_okay=False), help="CPTX with predictions.")
@click.option("--data", default=None, type=click.Path(exists=True, dir_okay=False),
              help="CPTX holding the truth; default: labels stored with the predictions.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--name", default="model", show_default=True, help="Model name used in the tables.")
@click.option("--dense", is_flag=True, help="Evaluate against dense synthetic truth.")
@click.option("--strips", "num_strips", type=int, default=4, show_default=True, help="Along-track strips to draw.")
@click.pass_obj
def cmd_eval(run: RunContext, pred, data, out, name, dense, num_strips):
    """Cloud-mask and phase metrics at labelled voxels."""
    cfg = run.settings.get("evaluation", {})
    run.begin("eval", pred=pred, data=data)
    patches = read_patches(pred)
    if data is not None:
        patches = _attach_truth(patches, read_patches(data))
    report = evaluate_patches(patches, dense=dense or bool(cfg.get("dense", False)))

    out_dir = Path(out)
    run.output(save_report(out_dir / METRICS_FILE, report, name))
    written = render_report(
        {name: report},
        out_dir,
        strip_sets={name: phase_strips(patches, limit=num_strips)},
        strip_scale=int(cfg.get("strip_scale", 1)),
    )
    for paths in written.values():
        for p in paths:
            run.output(p)
    run.finish(out_dir, voxels=report.num_voxels, warnings=report.warnings, **report.mask.row(), **report.phase.row())

    console.print(frame_table(table1({name: report}), title="Cloud mask"))
    console.print(frame_table(table2({name: report}), title="Cloud phase"))
    if report.degenerate:
        err_console.print(f"[yellow]Metric warnings:[/yellow] {', '.join(report.warnings)}")
        return 2
    return 0


@cli.command("report")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory searched recursively for eval outputs (metrics.json).")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.pass_obj
def cmd_report(run: RunContext, in_dir, out):
    """Combine several eval outputs into one pair of comparison tables."""
    run.begin("report", input=in_dir)
    reports = {}
    for path in sorted(Path(in_dir).rglob(METRICS_FILE)):
        name, report = load_report(path)
        if name in reports:
            name = f"{name}@{path.parent.name}"
        reports[name] = report
    if not reports:
        raise ValidationError(f"no {METRICS_FILE} found under {in_dir}", field="in", value=in_dir)

    out_dir = Path(out)
    written = render_report(reports, out_dir, strip_scale=int(run.settings.get("evaluation", {}).get("strip_scale", 1)))
    for paths in written.values():
        for p in paths:
            run.output(p)
    run.finish(out_dir, models=list(reports))

    console.print(frame_table(table1(reports), title="Cloud mask"))
    console.print(frame_table(table2(reports), title="Cloud phase"))
    return 2 if any(r.degenerate for r in reports.values()) else 0


@cli.command("stats")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="CPTX patches.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--dense", is_flag=True, help="Phase statistics from dense truth.")
@click.pass_obj
def cmd_stats(run: RunContext, data, out, dense):
    """Band densities, phase distribution and vertical coverage of a patch file."""
    run.begin("stats", data=data)
    summary = summarize_patches(read_patches(data), dense=dense)
    out_dir = Path(out)

    summary_path = run.output(out_dir / "summary.json")
    with atomic_write(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary.to_dict(), f, indent=2)
    for stem, frame in (("coverage", summary.coverage), ("densities", summary.densities)):
        path = run.output(out_dir / f"{stem}.csv")
        with atomic_write(path, "w", newline="", encoding="utf-8") as f:
            frame.to_csv(f, index=False, float_format="%.6f")
    run.output(write_html(vertical_coverage_figure(summary.coverage), out_dir / "coverage.html"))
    run.output(write_html(channel_density_figure(summary.densities), out_dir / "densities.html"))
    run.finish(out_dir, **summary.to_dict())

    console.print(summary_table(summary.to_dict(), title="Dataset"))
    return 0


def main() -> None:
    cli(prog_name="phaseprof")


if __name__ == "__main__":
    main()
