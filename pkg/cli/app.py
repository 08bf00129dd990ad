"""
CLI Application Module
Command implementations for julia-tc: synth, train, impute, eval, sweep.
"""

import csv
import datetime
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn, BarColumn, TaskProgressColumn, TimeElapsedColumn
from rich.table import Table

from core.config import RunConfig, TrainConfig
from core.errors import (
    JuliaError, ConfigError, TensorDataError, ShapeMismatchError,
    CheckpointError, EvaluationError, DivergenceError
)
from core.metrics import compute_metrics, align_components, success_rate
from core.model import JuliaModel, save_checkpoint, load_checkpoint
from core.models import SparseTensor, DatasetSplit, MetricsReport, AlignmentReport, check_bounds
from core.synth import SyntheticSpec, generate
from core.tensor_data import (
    read_coo, infer_n_modes, declared_shape, read_queries, save_coo,
    split_dataset, save_split, load_split
)
from core.trainer import JuliaTrainer, TrainPhase, TrainProgress, TrainReport
from core.utils import format_seconds, format_shape, parse_int_list


logger = logging.getLogger(__name__)

console = Console()
err_console = Console(stderr=True)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3
EXIT_INTERRUPTED = 130

SWEEP_COLUMNS = ('r', 'f', 'seed', 'rmse', 'mae', 'rfe', 'epochs', 'seconds', 'success')

# Handlers added by setup_logging, replaced on the next call
_installed_handlers: list[logging.Handler] = []


def setup_logging(
    command: str,
    log_dir: str = 'logs',
    log_file: bool = True,
    verbose: bool = False
) -> Optional[Path]:
    """
    Route log records to stderr through rich and, unless disabled, to a
    timestamped file ``<log_dir>/<command>_<YYYY-mm-dd_HH-MM-SS>.log``.

    Returns:
        Path of the log file, or None when no file is written.
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    while _installed_handlers:
        handler = _installed_handlers.pop()
        root.removeHandler(handler)
        handler.close()

    console_handler = RichHandler(console=err_console, show_path=False, rich_tracebacks=True)
    console_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(console_handler)
    _installed_handlers.append(console_handler)

    if not log_file:
        return None
    timestamp = datetime.datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
    log_path = Path(log_dir) / f"{command}_{timestamp}.log"
    try:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path, encoding='utf-8')
    except OSError as e:
        err_console.print(f"[yellow]Failed to create log file:[/] {e}")
        return None
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(file_handler)
    _installed_handlers.append(file_handler)
    logger.debug("=== julia-tc %s log started: %s ===", command, timestamp)
    return log_path


# ── Flag helpers ─────────────────────────────────────────────────────────────

def parse_rank_split(text: Optional[str]) -> tuple[int, int]:
    """
    Parse ``R/F`` into (R, F).

    Raises:
        ConfigError: Malformed text, negative ranks, or R + F < 1.
    """
    if not text:
        raise ConfigError("A rank split R/F is required")
    parts = str(text).strip().split('/')
    try:
        R, F = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"Rank split must look like R/F, got {text!r}")
    if R < 0 or F < 0 or R + F < 1:
        raise ConfigError(f"Rank split needs R >= 0, F >= 0 and R + F >= 1, got {text!r}")
    return R, F


def parse_rank_splits(text: Optional[str]) -> list[tuple[int, int]]:
    """Parse ``4/16,10/10,16/4``; an empty list is rejected."""
    splits = [parse_rank_split(part) for part in str(text or '').split(',') if part.strip()]
    if not splits:
        raise ConfigError("At least one rank split is required")
    return splits


def _require(run: RunConfig, key: str) -> Any:
    value = run.get(key)
    if value is None:
        raise ConfigError(f"--{key.replace('_', '-')} is required for {run.command}")
    return value


def _parse_shape(text: Any) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(d) for d in text)
    try:
        shape = tuple(parse_int_list(str(text)))
    except ValueError:
        raise ConfigError(f"Shape must be comma-separated integers, got {text!r}")
    if not shape:
        raise ConfigError("Shape must list at least one dimension")
    return shape


def _output_dir(path: Any) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise TensorDataError(f"Cannot create output directory {out}: {e}") from e
    return out


def _load_tensor(run: RunConfig, path: str, n_modes: Optional[int] = None) -> SparseTensor:
    return read_coo(
        path,
        n_modes if n_modes is not None else infer_n_modes(path),
        aggregate=run.get('aggregate'),
        one_based=bool(run.get('one_based', False)),
    )


def _json_safe(obj: Any) -> Any:
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _dump_json(obj: Any) -> str:
    return json.dumps(_json_safe(obj), indent=2, allow_nan=False) + '\n'


# ── Display ──────────────────────────────────────────────────────────────────

def display_metrics(metrics: MetricsReport, title: str):
    """Display a metrics report in a panel."""
    rfe = f"{metrics.rfe:.6g}" if metrics.rfe_defined else f"[red]{metrics.rfe_error}[/]"
    summary = f"""[bold cyan]RMSE:[/] {metrics.rmse:.6g}
[bold cyan]MAE:[/] {metrics.mae:.6g}
[bold cyan]RFE:[/] {rfe}
[bold cyan]Entries:[/] {metrics.n_entries:,}"""
    console.print(Panel(summary, title=f"[bold]{title}[/]", border_style="cyan"))


def display_alignment(alignment: AlignmentReport):
    """Display matched components in a table."""
    table = Table(title="Component Alignment", show_header=True, header_style="bold magenta")
    table.add_column("Estimated", style="dim", justify="right")
    table.add_column("Reference", style="cyan", justify="right")
    table.add_column("Congruence", justify="right", style="bold")
    for r, (s, c) in enumerate(zip(alignment.permutation, alignment.congruences)):
        table.add_row(str(r), str(s), f"{c:.4f}")
    console.print(table)
    console.print(f"[bold]Mean congruence:[/] {alignment.mean_congruence:.4f}")


def display_report(report: TrainReport, R: int, F: int):
    """Display the outcome of a training run."""
    border = "green" if report.success else "red"
    title = "Training Succeeded" if report.success else "Training Failed"
    summary = f"""[bold cyan]Model:[/] JULIA({R}/{F})
[bold cyan]Epochs:[/] {report.epochs} (warm start, AO, refine: {', '.join(str(report.epochs_in(p)) for p in TrainPhase)})
[bold cyan]Restarts:[/] {report.restart_count}
[bold cyan]Time:[/] {format_seconds(report.seconds)}"""
    console.print(Panel(summary, title=f"[bold {border}]{title}[/]", border_style=border))
    if report.final_metrics:
        display_metrics(report.final_metrics, "Validation Metrics")


def train_with_progress(
    data: SparseTensor,
    R: int,
    F: int,
    cfg: TrainConfig,
    split: DatasetSplit
) -> tuple[JuliaModel, TrainReport]:
    """Run the restart-wrapped trainer while showing a live progress line."""
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        TimeElapsedColumn(),
        console=console
    ) as progress:
        task = progress.add_task("Training...", total=None)

        def on_progress(p: TrainProgress):
            progress.update(
                task,
                description=(
                    f"attempt {p.attempt}/{p.max_attempts} [cyan]{p.phase.value}[/] "
                    f"epoch {p.epoch}: loss {p.train_loss:.4g}, val RMSE {p.val_rmse:.4g}"
                )
            )

        trainer = JuliaTrainer(cfg, progress_callback=on_progress)
        return trainer.train_with_restarts(data, data.shape, R, F, split)


# ── Commands ─────────────────────────────────────────────────────────────────

def cmd_synth(run: RunConfig) -> int:
    """Generate a synthetic tensor and its ground truth."""
    spec = SyntheticSpec(
        shape=_parse_shape(_require(run, 'shape')),
        R_true=int(_require(run, 'r_true')),
        F_true=int(_require(run, 'f_true')),
        missing_rate=float(run.get('missing', 0.8)),
        noise_std=float(run.get('noise', 0.0)),
        seed=int(_require(run, 'seed')),
        activation=run.get('activation', 'relu'),
    )
    out = _output_dir(_require(run, 'out'))

    console.print(Panel(escape(_dump_json(spec.to_dict()).strip()), title="[bold]Synthetic Spec[/]", border_style="cyan"))
    data, truth = generate(spec)
    save_coo(data, out / 'data.coo')
    save_checkpoint(truth, out / 'truth.ckpt.json')
    console.print(f"[green][OK][/] Wrote {data.nnz:,} entries of a {format_shape(data.shape)} tensor to {out}")
    return EXIT_OK


def cmd_train(run: RunConfig) -> int:
    """Train JULIA(R/F) on a COO file."""
    data_path = _require(run, 'data')
    R, F = parse_rank_split(_require(run, 'rank_split'))
    _require(run, 'seed')
    cfg = run.train_config()
    out = _output_dir(run.get('out', 'run'))

    data = _load_tensor(run, data_path)
    if run.get('shape') is not None:
        data = SparseTensor(_parse_shape(run.get('shape')), data.indices, data.values)
    if run.get('split'):
        split = load_split(run.get('split'), data.nnz)
    else:
        split = split_dataset(data, cfg.train_frac, cfg.val_frac, cfg.seed)

    console.print(f"\n[bold]Training JULIA({R}/{F})[/] on {data.nnz:,} entries of a {format_shape(data.shape)} tensor")
    model, report = train_with_progress(data, R, F, cfg, split)

    test_metrics = None
    if split.test.size:
        test = data.subset(split.test)
        test_metrics = compute_metrics(model.predict_batch(test.indices), test.values)

    include_timing = not cfg.deterministic
    save_checkpoint(model, out / 'model.ckpt.json')
    report.write_history_csv(out / 'history.csv', include_timing)
    report.write_summary_json(out / 'summary.json', include_timing, extra={
        'rank_split': f"{R}/{F}",
        'shape': list(data.shape),
        'test_metrics': _json_safe(test_metrics.to_dict()) if test_metrics else None,
        'config': cfg.to_dict(),
    })
    save_split(split, out / 'split.json')

    display_report(report, R, F)
    if test_metrics:
        display_metrics(test_metrics, "Test Metrics")
    console.print(f"[green][OK][/] Outputs written to {out}")
    return EXIT_OK if report.success else EXIT_TRAINING


def cmd_impute(run: RunConfig) -> int:
    """Predict values at query indices."""
    model = load_checkpoint(_require(run, 'model'))
    one_based = bool(run.get('one_based', False))
    indices, errors = read_queries(_require(run, 'queries'), model.shape, one_based)
    if errors:
        for e in errors:
            logger.error("%s", e)
        err_console.print(f"[bold red]ERROR:[/] {len(errors)} invalid query line(s); nothing written")
        return EXIT_DATA

    offset = 1 if one_based else 0
    values = model.predict_batch(indices) if len(indices) else []
    lines = [
        ','.join(str(int(i) + offset) for i in index) + f",{float(v)!r}\n"
        for index, v in zip(indices, values)
    ]
    target = run.get('out')
    if target:
        try:
            Path(target).write_text(''.join(lines), encoding='utf-8')
        except OSError as e:
            raise TensorDataError(f"Cannot write {target}: {e}") from e
        console.print(f"[green][OK][/] Wrote {len(lines):,} predictions to {target}")
    else:
        sys.stdout.write(''.join(lines))
    return EXIT_OK


def cmd_eval(run: RunConfig) -> int:
    """Score a checkpoint on held-out entries, optionally aligning against a reference."""
    model = load_checkpoint(_require(run, 'model'))
    data_path = _require(run, 'data')
    declared = declared_shape(data_path)
    if declared is not None and declared != model.shape:
        raise ShapeMismatchError(
            f"Data shape {format_shape(declared)} differs from checkpoint shape {format_shape(model.shape)}"
        )
    data = _load_tensor(run, data_path, model.ndim)
    check_bounds(data.indices, model.shape)

    metrics = compute_metrics(model.predict_batch(data.indices), data.values)
    result: dict[str, Any] = {'metrics': metrics.to_dict()}
    display_metrics(metrics, "Evaluation Metrics")

    if run.get('align'):
        reference = load_checkpoint(run.get('align'))
        alignment = align_components(model.cp, reference.cp)
        result['alignment'] = alignment.to_dict()
        display_alignment(alignment)

    text = _dump_json(result)
    if run.get('out'):
        try:
            Path(run.get('out')).write_text(text, encoding='utf-8')
        except OSError as e:
            raise TensorDataError(f"Cannot write {run.get('out')}: {e}") from e
    else:
        console.print_json(text)
    return EXIT_OK


@dataclass
class SweepRow:
    """Outcome of one (rank split, seed) cell of a sweep."""
    r: int
    f: int
    seed: int
    metrics: Optional[MetricsReport] = None
    epochs: int = 0
    seconds: float = 0.0
    error: Optional[str] = None

    @property
    def rfe(self) -> float:
        if self.metrics is None or not self.metrics.rfe_defined:
            return math.inf
        return self.metrics.rfe

    @property
    def success(self) -> bool:
        return self.rfe < 1

    def csv_row(self, include_timing: bool) -> list[str]:
        m = self.metrics
        return [
            str(self.r), str(self.f), str(self.seed),
            repr(m.rmse) if m else '', repr(m.mae) if m else '',
            repr(m.rfe) if m and m.rfe_defined else '',
            str(self.epochs),
            repr(self.seconds) if include_timing else '0.0',
            str(int(self.success)),
        ]


def run_sweep_cell(data: SparseTensor, R: int, F: int, seed: int, cfg: TrainConfig) -> SweepRow:
    """Train one cell and score it on its test partition; errors are captured in the row."""
    cell_cfg = cfg.with_seed(seed)
    try:
        split = split_dataset(data, cell_cfg.train_frac, cell_cfg.val_frac, seed)
        model, report = JuliaTrainer(cell_cfg).train_with_restarts(data, data.shape, R, F, split)
        target = data.subset(split.test if split.test.size else split.train)
        metrics = compute_metrics(model.predict_batch(target.indices), target.values)
        return SweepRow(R, F, seed, metrics, report.epochs, report.seconds)
    except JuliaError as e:
        logger.error("Sweep cell %d/%d seed %d failed: %s", R, F, seed, e)
        return SweepRow(R, F, seed, error=str(e))


def cmd_sweep(run: RunConfig) -> int:
    """Train every (rank split, seed) cell and tabulate the results."""
    data_path = _require(run, 'data')
    splits = parse_rank_splits(_require(run, 'splits'))
    if run.get('seeds') is not None:
        seeds = parse_int_list(str(run.get('seeds')))
    else:
        seeds = [int(_require(run, 'seed'))]
    if not seeds:
        raise ConfigError("At least one seed is required")
    jobs = int(run.get('jobs', 1))
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    cfg = run.train_config()
    out = Path(run.get('out', 'sweep.csv'))

    data = _load_tensor(run, data_path)
    cells = [(R, F, seed) for R, F in splits for seed in seeds]
    rows: dict[tuple[int, int, int], SweepRow] = {}

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TaskProgressColumn(),
        TimeElapsedColumn(),
        console=console
    ) as progress:
        task = progress.add_task("Sweep...", total=len(cells))
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            future_to_cell = {
                executor.submit(run_sweep_cell, data, R, F, seed, cfg): (R, F, seed)
                for R, F, seed in cells
            }
            for future in as_completed(future_to_cell):
                R, F, seed = future_to_cell[future]
                rows[(R, F, seed)] = future.result()
                progress.update(task, advance=1, description=f"[cyan]{R}/{F}[/] seed {seed} done")

    include_timing = not cfg.deterministic
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(SWEEP_COLUMNS)
            for R, F in splits:
                split_rows = [rows[(R, F, seed)] for seed in seeds]
                for row in split_rows:
                    writer.writerow(row.csv_row(include_timing))
                rate = success_rate([row.rfe for row in split_rows])
                writer.writerow([str(R), str(F), 'success_rate', '', '', '', '', '', repr(rate)])
    except OSError as e:
        raise TensorDataError(f"Cannot write {out}: {e}") from e

    table = Table(title="Sweep Results", show_header=True, header_style="bold magenta")
    table.add_column("R/F", style="cyan")
    table.add_column("Runs", justify="right")
    table.add_column("Success rate", justify="right", style="bold")
    table.add_column("Best test RMSE", justify="right", style="green")
    for R, F in splits:
        split_rows = [rows[(R, F, seed)] for seed in seeds]
        rmses = [row.metrics.rmse for row in split_rows if row.metrics]
        table.add_row(
            f"{R}/{F}", str(len(split_rows)),
            f"{success_rate([row.rfe for row in split_rows]):.2f}",
            f"{min(rmses):.4g}" if rmses else "-",
        )
    console.print(table)
    console.print(f"[green][OK][/] Wrote {out}")
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    'synth': cmd_synth,
    'train': cmd_train,
    'impute': cmd_impute,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
}


def run_command(
    command: str,
    flags: dict[str, Any],
    config_path: Optional[str] = None,
    log_dir: str = 'logs',
    log_file: bool = True,
    verbose: bool = False
) -> int:
    """
    Main CLI entry point: merge config, set up logging, dispatch, map errors
    to exit codes.

    Returns:
        0 success, 1 usage/config error, 2 data error, 3 training failure.
    """
    setup_logging(command, log_dir, log_file, verbose)
    try:
        run = RunConfig.build(command, flags, config_path)
        if command in ('train', 'sweep'):
            run.train_config()
        return COMMANDS[command](run)
    except ConfigError as e:
        err_console.print(f"[bold red]ERROR:[/] {e}")
        return EXIT_USAGE
    except DivergenceError as e:
        err_console.print(f"[bold red]TRAINING FAILED:[/] {e}")
        return EXIT_TRAINING
    except (TensorDataError, ShapeMismatchError, CheckpointError, EvaluationError) as e:
        err_console.print(f"[bold red]DATA ERROR:[/] {e}")
        return EXIT_DATA
