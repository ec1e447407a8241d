#!/usr/bin/env python3
"""Command-line interface for ucr (lifelong unsupervised contrastive rehearsal)."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import typer
from rich.console import Console

from ucr import __version__
from ucr.config import BaselineVariant, HyperParams, MemoryPolicy, load_config, write_config
from ucr.core import resolve_workers
from ucr.errors import (
    ConfigError,
    DataError,
    EvaluationError,
    FormatError,
    LossInputError,
    TrainingError,
    UCRError,
)
from ucr.evaluation import (
    EvalRecord,
    evaluate,
    write_forgetting_csv,
    write_report_csv,
)
from ucr.experiments import (
    DEFAULT_KMEM_VALUES,
    ablation_grid,
    kmem_sweep,
    run_experiment,
    write_summary_csv,
)
from ucr.formats import read_checkpoint, write_checkpoint, write_memory_dump
from ucr.synthdata import StreamSpec, generate_stream, read_dataset, write_dataset
from ucr.ui import RunUI, configure_logging

EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAINING = 5

console = Console()
err_console = Console(stderr=True)

app = typer.Typer(
    name="ucr",
    help="Lifelong unsupervised contrastive rehearsal on streams of unlabeled domains",
    no_args_is_help=True,
)


def exit_code_for(error: UCRError) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (DataError, FormatError)):
        return EXIT_DATA
    if isinstance(error, (TrainingError, LossInputError, EvaluationError)):
        return EXIT_TRAINING
    return 1


@contextmanager
def _handle_errors() -> Iterator[None]:
    try:
        yield
    except UCRError as e:
        RunUI(err_console).show_error(f"{type(e).__name__}: {e}")
        raise typer.Exit(code=exit_code_for(e)) from e


@contextmanager
def atomic_output(out: Path, overwrite: bool = False) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    if out.exists() and not overwrite:
        raise DataError(f"output directory {out} exists (pass --overwrite to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(scratch, out)


@dataclass
class RunManifest:
    """What a run did, written as ``run.json`` next to its outputs."""

    command: str
    config: str | None
    data: str | None
    out: str
    seed: int
    use_old: bool
    use_sim: bool
    options: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")


def _hyperparams(
    config: Path | None,
    seed: int | None = None,
    no_old: bool = False,
    no_sim: bool = False,
    baseline_variant: BaselineVariant | None = None,
    k_mem: int | None = None,
    memory_policy: MemoryPolicy | None = None,
) -> HyperParams:
    hp = load_config(config) if config is not None else HyperParams()
    return hp.replace(
        seed=seed,
        use_old=False if no_old else None,
        use_sim=False if no_sim else None,
        baseline_variant=baseline_variant.value if baseline_variant else None,
        k_mem=k_mem,
        memory_policy=memory_policy.value if memory_policy else None,
    )


# Shared options
ConfigOpt = typer.Option(None, "--config", help="JSON hyperparameter file")
DataOpt = typer.Option(..., "--data", help="Dataset directory")
SeedOpt = typer.Option(None, "--seed", help="Override the configured seed")
OverwriteOpt = typer.Option(False, "--overwrite", help="Replace an existing output directory")
VerboseOpt = typer.Option(False, "--verbose", "-v", help="Debug logging")
ReverseOpt = typer.Option(False, "--reverse-order", help="Train the seen domains in reverse order")


@app.command()
def generate(
    out: Path = typer.Option(..., "--out", help="Dataset directory to create"),
    seed: int = typer.Option(0, "--seed"),
    domains: int = typer.Option(3, "--domains", help="Seen (training) domains"),
    ids: int = typer.Option(30, "--ids", help="Identities per domain"),
    samples: int = typer.Option(12, "--samples", help="Samples per identity"),
    cameras: int = typer.Option(3, "--cameras", help="Cameras per domain"),
    d_in: int = typer.Option(32, "--d-in", help="Raw feature dimension"),
    eval_ids: int = typer.Option(10, "--eval-ids", help="Held-out identities per seen domain"),
    unseen: int = typer.Option(2, "--unseen", help="Evaluation-only domains"),
    noise: float = typer.Option(0.2, "--noise"),
    camera_shift: float = typer.Option(0.3, "--camera-shift"),
    domain_rotation: float = typer.Option(0.3, "--domain-rotation"),
    domain_translation: float = typer.Option(1.0, "--domain-translation"),
    latent_dim: int = typer.Option(6, "--latent-dim", help="Identity subspace dimension"),
    identity_spread: float = typer.Option(1.0, "--identity-spread"),
    style_shift: float = typer.Option(
        0.5, "--style-shift", help="Style variation along other domains' identity subspaces"
    ),
    overwrite: bool = OverwriteOpt,
    verbose: bool = VerboseOpt,
):
    """Generate a synthetic lifelong domain stream."""
    configure_logging(console, verbose)
    ui = RunUI(console)
    with _handle_errors():
        spec = StreamSpec(
            num_domains=domains,
            ids_per_domain=ids,
            samples_per_id=samples,
            cameras_per_domain=cameras,
            d_in=d_in,
            eval_ids=eval_ids,
            num_unseen=unseen,
            latent_dim=latent_dim,
            identity_spread=identity_spread,
            style_shift=style_shift,
            camera_shift=camera_shift,
            domain_rotation=domain_rotation,
            domain_translation=domain_translation,
            noise=noise,
            seed=seed,
        )
        with ui.show_status("Generating stream..."):
            stream = generate_stream(spec)
        with atomic_output(out, overwrite) as scratch:
            write_dataset(stream, scratch)
    ui.show_success(
        f"Wrote {len(stream.seen)} seen and {len(stream.unseen)} unseen domains to {out}"
    )


@app.command()
def train(
    data: Path = DataOpt,
    out: Path = typer.Option(..., "--out", help="Run directory to create"),
    config: Path | None = ConfigOpt,
    seed: int | None = SeedOpt,
    no_old: bool = typer.Option(False, "--no-old", help="Disable the old-domain rehearsal loss"),
    no_sim: bool = typer.Option(False, "--no-sim", help="Disable the similarity constraint"),
    baseline_variant: BaselineVariant | None = typer.Option(None, "--baseline-variant"),
    k_mem: int | None = typer.Option(None, "--k-mem", help="Images stored per cluster"),
    memory_policy: MemoryPolicy | None = typer.Option(None, "--memory-policy"),
    reverse_order: bool = ReverseOpt,
    overwrite: bool = OverwriteOpt,
    verbose: bool = VerboseOpt,
):
    """Run lifelong training with evaluation after every domain."""
    configure_logging(console, verbose)
    ui = RunUI(console)
    with _handle_errors():
        hp = _hyperparams(config, seed, no_old, no_sim, baseline_variant, k_mem, memory_policy)
        stream = read_dataset(data)
        ui.show_run_panel(
            "train",
            {
                "data": data,
                "domains": len(stream.seen),
                "rehearsal": f"old={hp.use_old} sim={hp.use_sim}",
                "variant": hp.baseline_variant,
                "seed": hp.seed,
            },
        )
        with atomic_output(out, overwrite) as scratch:

            def save_checkpoint(step, state):
                write_checkpoint(state.encoders.momentum, scratch / f"checkpoint_domain_{step}.ucrw")

            with ui.progress() as progress:
                task = progress.add_task(
                    "training", total=len(stream.seen) * hp.epochs_per_domain
                )
                experiment = run_experiment(
                    stream,
                    hp,
                    reverse=reverse_order,
                    on_epoch_end=lambda _: progress.advance(task),
                    on_domain_end=save_checkpoint,
                )
            result = experiment.result
            write_checkpoint(result.momentum, scratch / "final.ucrw")
            result.metrics.write_csv(scratch / "metrics.csv")
            write_report_csv(experiment.records, scratch / "eval.csv")
            write_forgetting_csv(experiment.first_domain_curve(), scratch / "forgetting.csv")
            write_memory_dump(result.state.bank, result.state.memory, scratch / "memory.ucrm")
            write_config(hp, scratch / "config.json")
            RunManifest(
                command="train",
                config=str(config) if config else None,
                data=str(data),
                out=str(out),
                seed=hp.seed,
                use_old=hp.use_old,
                use_sim=hp.use_sim,
                options={
                    "baseline_variant": hp.baseline_variant,
                    "k_mem": hp.k_mem,
                    "memory_policy": hp.memory_policy,
                    "reverse_order": reverse_order,
                },
            ).write(scratch / "run.json")
    ui.show_report_table(experiment.final_records(), title="Final evaluation")
    if result.metrics.skipped_epochs:
        ui.show_warning(f"{result.metrics.skipped_epochs} epochs skipped (no clusters)")
    ui.show_success(f"Run written to {out}")


@app.command(name="eval")
def eval_(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Encoder checkpoint (.ucrw)"),
    data: Path = DataOpt,
    splits: list[str] | None = typer.Option(
        None, "--split", help="Split name to evaluate (repeatable; default all)"
    ),
    out: Path | None = typer.Option(None, "--out", help="Report CSV to write"),
    step: int = typer.Option(0, "--step", help="Step label stored in the report"),
    verbose: bool = VerboseOpt,
):
    """Evaluate a checkpoint on seen and unseen splits."""
    configure_logging(console, verbose)
    ui = RunUI(console)
    with _handle_errors():
        params = read_checkpoint(checkpoint)
        stream = read_dataset(data)
        if params.d_in != stream.d_in:
            raise DataError(
                f"checkpoint expects d_in={params.d_in}, dataset has d_in={stream.d_in}"
            )
        targets = (
            [stream.split(name) for name in splits]
            if splits
            else stream.seen_splits() + stream.unseen_splits()
        )
        workers = resolve_workers()
        records = [EvalRecord(s.name, step, evaluate(params, s, workers)) for s in targets]
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            write_report_csv(records, out)
    ui.show_report_table(records)
    if out is not None:
        ui.show_success(f"Report written to {out}")


def _summary_run(
    command: str,
    data: Path,
    out: Path,
    config: Path | None,
    seed: int | None,
    reverse_order: bool,
    overwrite: bool,
    runner,
    hp_overrides: dict,
    options: dict,
    csv_name: str,
    title: str,
    label: str,
) -> None:
    ui = RunUI(console)
    with _handle_errors():
        hp = _hyperparams(config, seed, **hp_overrides)
        stream = read_dataset(data)
        with atomic_output(out, overwrite) as scratch:
            rows = runner(
                stream,
                hp,
                reverse=reverse_order,
                on_run=lambda name: ui.show_info(f"running {name}"),
            )
            write_summary_csv(rows, scratch / csv_name)
            write_config(hp, scratch / "config.json")
            RunManifest(
                command=command,
                config=str(config) if config else None,
                data=str(data),
                out=str(out),
                seed=hp.seed,
                use_old=hp.use_old,
                use_sim=hp.use_sim,
                options={"reverse_order": reverse_order, **options},
            ).write(scratch / "run.json")
    ui.show_summary_table(title, label, [vars(r) for r in rows])
    ui.show_success(f"Summary written to {out / csv_name}")


@app.command()
def ablate(
    data: Path = DataOpt,
    out: Path = typer.Option(..., "--out", help="Directory for the ablation table"),
    config: Path | None = ConfigOpt,
    seed: int | None = SeedOpt,
    baseline_variant: BaselineVariant | None = typer.Option(None, "--baseline-variant"),
    k_mem: int | None = typer.Option(None, "--k-mem"),
    memory_policy: MemoryPolicy | None = typer.Option(None, "--memory-policy"),
    reverse_order: bool = ReverseOpt,
    overwrite: bool = OverwriteOpt,
    verbose: bool = VerboseOpt,
):
    """Run baseline, +old, +sim and +old+sim with a shared seed."""
    configure_logging(console, verbose)
    _summary_run(
        "ablate",
        data,
        out,
        config,
        seed,
        reverse_order,
        overwrite,
        ablation_grid,
        {"baseline_variant": baseline_variant, "k_mem": k_mem, "memory_policy": memory_policy},
        {},
        "ablation.csv",
        "Contrastive rehearsal ablation",
        "run",
    )


@app.command(name="kmem-sweep")
def kmem_sweep_(
    data: Path = DataOpt,
    out: Path = typer.Option(..., "--out", help="Directory for the sweep table"),
    config: Path | None = ConfigOpt,
    seed: int | None = SeedOpt,
    values: list[int] = typer.Option(
        list(DEFAULT_KMEM_VALUES), "--k-mem", help="K_mem value to try (repeatable)"
    ),
    memory_policy: MemoryPolicy | None = typer.Option(None, "--memory-policy"),
    reverse_order: bool = ReverseOpt,
    overwrite: bool = OverwriteOpt,
    verbose: bool = VerboseOpt,
):
    """Full rehearsal runs over several image-memory sizes."""
    configure_logging(console, verbose)
    ks = tuple(values)

    def runner(stream, hp, reverse, on_run):
        return kmem_sweep(stream, hp, ks, reverse=reverse, on_run=on_run)

    _summary_run(
        "kmem-sweep",
        data,
        out,
        config,
        seed,
        reverse_order,
        overwrite,
        runner,
        {"memory_policy": memory_policy},
        {"k_mem_values": list(ks)},
        "kmem_sweep.csv",
        "Image memory size",
        "K_mem",
    )


def main():
    """Main entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
