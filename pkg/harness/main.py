"""Entry point for running the inspection pipeline."""

import argparse
import sys
from pathlib import Path

from engine import trace
from engine.config import PROFILES
from engine.pipeline import STAGES, Pipeline


def _build_parser(data_root: Path) -> argparse.ArgumentParser:
    # Discover shipped profiles for nicer --help
    profiles: list[str] = []
    if (data_root / "profiles").exists():
        profiles = sorted(p.stem for p in (data_root / "profiles").glob("*.yaml"))
    epilog = "Available profiles: " + ", ".join(profiles) if profiles else None

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML or JSON document merged over the profile")
    common.add_argument("--seed", type=int, default=None, help="Override the run seed")
    common.add_argument("--profile", choices=PROFILES, default="desk")
    common.add_argument("--odometry", choices=("truth", "eskf"), default=None, help="Odometry fed back to the tracker")
    common.add_argument("--run-dir", dest="run_dir", type=Path, default=Path("run"), help="Output directory (default ./run)")
    common.add_argument(
        "--debug",
        nargs="?",
        const=True,
        metavar="FILE",
        help=("Enable debug mode; optionally provide FILE to tee STDOUT to it and redirect STDERR only to it"),
    )

    parser = argparse.ArgumentParser(
        prog="shm-inspect",
        epilog=epilog,
        formatter_class=argparse.RawTextHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="Generate the synthetic facility scan")
    sub.add_parser("segment", parents=[common], help="Extract ground, roof, walls and columns")
    sub.add_parser("plan", parents=[common], help="Generate scan paths per wall and column")
    sub.add_parser("explore", parents=[common], help="Explore, repair and fly every scan path")
    sub.add_parser("estimate", parents=[common], help="Run the state estimator on a figure-eight flight")
    sub.add_parser("fly", parents=[common], help="Planner benchmark and tracking speed sweep")
    metrics = sub.add_parser("metrics", parents=[common], help="Image quality filtering and the run summary")
    metrics.add_argument("--fit-model", dest="fit_model", action="store_true", help="Refit the natural scene model")
    metrics.add_argument("--model", type=Path, default=None, help="Natural scene model file to use instead of the shipped one")
    metrics.add_argument("--images", type=Path, default=None, help="Folder of PGM captures to score instead of renders")
    metrics.add_argument("--reference", type=Path, default=None, help="Folder of reference PGMs for PSNR, matched by name")
    all_cmd = sub.add_parser("all", parents=[common], help="Run every stage in order")
    all_cmd.add_argument("--fit-model", dest="fit_model", action="store_true", help="Refit the natural scene model")
    all_cmd.add_argument("--model", type=Path, default=None, help="Natural scene model file to use instead of the shipped one")
    return parser


def _run(args: argparse.Namespace, data_root: Path) -> None:
    stages = list(STAGES) if args.command == "all" else [args.command]
    pipeline = Pipeline(
        data_root,
        args.run_dir,
        args.profile,
        config_path=args.config,
        seed=args.seed,
        odometry=args.odometry,
        model_path=getattr(args, "model", None),
        refit_model=getattr(args, "fit_model", False),
        image_dir=getattr(args, "images", None),
        reference_dir=getattr(args, "reference", None),
    )
    report = pipeline.run(stages)
    if report.errors:
        for msg in report.errors:
            pipeline.io.output(f"WARNING: {msg}")


def run_cli(argv: list[str] | None = None) -> None:
    data_root = Path(__file__).parent.parent / "data"
    args = _build_parser(data_root).parse_args(argv)
    debug_opt = args.debug

    if isinstance(debug_opt, str):  # --debug FILE provided
        # Enable traces and tee/redirect streams accordingly
        orig_stdout = sys.stdout
        orig_stderr = sys.stderr

        class _TeeStdout:
            def __init__(self, console_stream, file_stream):
                self._console = console_stream
                self._file = file_stream

            def write(self, s: str) -> int:  # type: ignore[override]
                n1 = self._console.write(s)
                n2 = self._file.write(s)
                return n1 if n1 is not None else (n2 or 0)

            def flush(self) -> None:
                self._console.flush()
                self._file.flush()

            def isatty(self) -> bool:  # pragma: no cover - tty detection
                return False

            @property
            def encoding(self) -> str:  # pragma: no cover - compatibility
                return getattr(self._console, "encoding", "utf-8")

        class _OnlyFile:
            def __init__(self, file_stream):
                self._file = file_stream

            def write(self, s: str) -> int:  # type: ignore[override]
                return self._file.write(s)

            def flush(self) -> None:
                self._file.flush()

            def isatty(self) -> bool:  # pragma: no cover - tty detection
                return False

            @property
            def encoding(self) -> str:  # pragma: no cover - compatibility
                return getattr(self._file, "encoding", "utf-8")

        with open(debug_opt, "w", encoding="utf-8") as fh:
            try:
                sys.stdout = _TeeStdout(orig_stdout, fh)
                sys.stderr = _OnlyFile(fh)
                trace.TRACE.enable()
                _run(args, data_root)
            finally:
                trace.TRACE.enable(False)
                sys.stdout = orig_stdout
                sys.stderr = orig_stderr
    elif debug_opt is True:  # --debug without file
        trace.TRACE.enable()
        try:
            _run(args, data_root)
        finally:
            trace.TRACE.enable(False)
    else:
        _run(args, data_root)


if __name__ == "__main__":
    run_cli()
