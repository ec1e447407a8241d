"""Rich-based run output (separate from training and evaluation logic)."""

from __future__ import annotations

import logging

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.status import Status
from rich.table import Table

from ucr.evaluation import EvalRecord


def configure_logging(console: Console, verbose: bool = False) -> None:
    """Route library logging through a single RichHandler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _pct(value: float) -> str:
    return f"{100.0 * value:.1f}"


class RunUI:
    """Handles all console output of the ucr commands.

    Attributes:
        console: Rich Console instance for output
    """

    def __init__(self, console: Console):
        self.console = console

    def show_run_panel(self, command: str, details: dict[str, object]) -> None:
        """Display what a command is about to do."""
        lines = "\n".join(f"[bold]{k}:[/bold] {v}" for k, v in details.items())
        self.console.print()
        self.console.print(
            Panel.fit(f"[bold cyan]ucr {command}[/bold cyan]\n\n{lines}", border_style="cyan")
        )
        self.console.print()

    def show_status(self, message: str) -> Status:
        """Return a status spinner for a single blocking step.

        Example:
            >>> with ui.show_status("Generating stream..."):
            ...     stream = generate_stream(spec)
        """
        return Status(f"[bold cyan]{message}", console=self.console)

    def progress(self) -> Progress:
        """Progress bar for epoch-level training loops."""
        return Progress(
            TextColumn("[bold cyan]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
        )

    def show_report_table(self, records: list[EvalRecord], title: str = "Evaluation") -> None:
        """Display mAP and CMC per split (percent)."""
        table = Table(title=title)
        table.add_column("split")
        table.add_column("step", justify="right")
        table.add_column("mAP", justify="right")
        table.add_column("R1", justify="right")
        table.add_column("R5", justify="right")
        table.add_column("R10", justify="right")
        table.add_column("skipped", justify="right")
        for record in records:
            r = record.report
            table.add_row(
                record.split_name,
                str(record.step),
                _pct(r.mAP),
                _pct(r.rank(1)),
                _pct(r.rank(5)),
                _pct(r.rank(10)),
                str(r.skipped),
            )
        self.console.print(table)

    def show_summary_table(self, title: str, label: str, rows: list[dict]) -> None:
        """Display an ablation or sweep summary.

        Args:
            title: Table title
            label: Header of the first column
            rows: Dicts with ``label``, ``seen_map``, ``seen_rank1``,
                ``unseen_map`` and ``unseen_rank1`` keys
        """
        table = Table(title=title)
        table.add_column(label)
        for header in ("seen mAP", "seen R1", "unseen mAP", "unseen R1"):
            table.add_column(header, justify="right")
        for row in rows:
            table.add_row(
                str(row["label"]),
                _pct(row["seen_map"]),
                _pct(row["seen_rank1"]),
                _pct(row["unseen_map"]),
                _pct(row["unseen_rank1"]),
            )
        self.console.print(table)

    def show_success(self, message: str) -> None:
        self.console.print(f"\n[bold green]✓[/bold green] {message}")

    def show_error(self, message: str) -> None:
        self.console.print(f"\n[bold red]✗[/bold red] {message}")

    def show_warning(self, message: str) -> None:
        self.console.print(f"\n[bold yellow]⚠[/bold yellow] {message}")

    def show_info(self, message: str) -> None:
        self.console.print(f"[dim]{message}[/dim]")
