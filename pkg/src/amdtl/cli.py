"""Command-line harness: ``amdtl <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import TOGGLES, ConfigError, ExperimentConfig, load_config
from .evaluation import curve_csv, robustness_curve
from .pipeline import (TARGET, Pretrained, adapt, decode_state, describe_run, encode_state, evaluate,
                       generate_sets, load_bundle, meta_phase, pretrain, stage_seed, to_csv, variant_name, variants)
from .runner import Layout, NoRunsError, dumps, emit_report, load_runs, run_jobs, save_run, write_atomic, write_manifest

SUBCOMMANDS = ("generate-data", "pretrain", "meta-train", "adapt", "evaluate", "ablate", "robustness", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amdtl", description="Desk-scale meta-domain transfer experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS, metavar="subcommand", help=" | ".join(SUBCOMMANDS))
    p.add_argument("--config", type=Path, help="experiment config JSON (default: built-in desk template)")
    p.add_argument("--seed", type=int, help="single seed; overrides the config's seed list")
    p.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent (variant, seed) jobs for ablate")
    p.add_argument("--ablate", help=f"comma-separated toggles to ablate ({','.join(TOGGLES)})")
    return p


class MissingArtifact(RuntimeError):
    pass


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def _load_state(cfg, prefix: Path):
    npz, meta = _require(prefix.with_suffix(".npz")), _require(prefix.with_suffix(".json"))
    return decode_state(cfg, npz.read_bytes(), meta.read_text())


def _save_state(prefix: Path, state, toggles, extra=None) -> list[Path]:
    blob, meta = encode_state(state, toggles, extra)
    return [write_atomic(prefix.with_suffix(".npz"), blob), write_atomic(prefix.with_suffix(".json"), meta)]


class App:
    def __init__(self, cfg: ExperimentConfig, args):
        self.cfg = cfg
        self.args = args
        self.layout = Layout(args.out or cfg.out_dir)
        self.seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
        self.emitted: list[Path] = []
        self.timings: dict[str, dict] = {}

    def data(self, seed: int):
        return load_bundle(self.cfg, _require(self.layout.dataset(seed)).read_text(), seed)

    def finish(self) -> None:
        write_manifest(self.layout, self.cfg, self.seeds, self.emitted, self.timings)

    # one method per subcommand
    def generate_data(self):
        for s in self.seeds:
            self.emitted.append(write_atomic(self.layout.dataset(s), to_csv(generate_sets(self.cfg, s))))
        self.finish()

    def meta_train(self):
        for s in self.seeds:
            t: dict = {}
            pre = meta_phase(self.cfg, self.cfg.toggles, self.data(s), s, t)
            self.emitted += _save_state(self.layout.state(s, "meta_state"), pre.state, self.cfg.toggles,
                                        {"meta_losses": pre.meta_losses, "timings": t})
            self.timings[f"seed_{s}"] = t
        self.finish()

    def pretrain(self):
        for s in self.seeds:
            t: dict = {}
            data = self.data(s)
            start = None
            prefix = self.layout.state(s, "meta_state")
            if prefix.with_suffix(".json").is_file():
                state, _, meta = _load_state(self.cfg, prefix)
                start = Pretrained(state, meta["meta_losses"])
                t.update(meta.get("timings", {}))
            pre = pretrain(self.cfg, self.cfg.toggles, data, s, t, start)
            self.emitted += _save_state(self.layout.state(s, "pretrained"), pre.state, self.cfg.toggles,
                                        {"meta_losses": pre.meta_losses, "timings": t})
            self.emitted.append(write_atomic(self.layout.seed_dir(s) / "train_log.csv", pre.state.log_csv()))
            self.timings[f"seed_{s}"] = t
        self.finish()

    def adapt(self):
        for s in self.seeds:
            state, toggles, meta = _load_state(self.cfg, self.layout.state(s, "pretrained"))
            t = dict(meta.get("timings", {}))
            state = adapt(self.cfg, state, self.data(s), t)
            self.emitted += _save_state(self.layout.state(s, "adapted"), state, toggles,
                                        {"meta_losses": meta["meta_losses"], "timings": t})
            self.timings[f"seed_{s}"] = t
        self.finish()

    def evaluate(self):
        for s in self.seeds:
            state, toggles, meta = _load_state(self.cfg, self.layout.state(s, "adapted"))
            t = dict(meta.get("timings", {}))
            pre_state, _, _ = _load_state(self.cfg, self.layout.state(s, "pretrained"))
            data = self.data(s)
            name = variant_name(toggles)
            result = describe_run(self.cfg, name, toggles, s, Pretrained(pre_state, meta["meta_losses"]),
                                  state, data, t)
            run_dir = self.layout.run_dir(name, s)
            self.emitted.append(write_atomic(run_dir / "result.json", dumps(result)))
            self.emitted.append(write_atomic(run_dir / "timing.json", dumps(t)))
            self.emitted.append(write_atomic(run_dir / "train_log.csv", state.log_csv()))
            preds = evaluate(state, data[TARGET, "test"], TARGET).predictions_csv()
            self.emitted.append(write_atomic(self.layout.seed_dir(s) / "predictions.csv", preds))
            self.timings[f"seed_{s}"] = t
        self.finish()

    def robustness(self):
        rc = self.cfg.robustness
        for s in self.seeds:
            state, _, _ = _load_state(self.cfg, self.layout.state(s, "adapted"))
            test = self.data(s)[TARGET, "test"]
            fwd = state.forward("eval", TARGET)
            parts = []
            for kind, grid in (("fgsm", rc.fgsm_grid), ("pgd", rc.pgd_grid), ("noise", rc.noise_grid)):
                if grid:
                    rows = robustness_curve(fwd, test.inputs, test.labels, grid, kind,
                                            stage_seed(s, "noise"), rc.pgd_steps)
                    text = curve_csv(kind, rows)
                    parts.append(text if not parts else text.split("\n", 1)[1])
            self.emitted.append(write_atomic(self.layout.seed_dir(s) / "robustness.csv", "".join(parts)))
        self.finish()

    def ablate(self):
        wanted = None
        if self.args.ablate:
            wanted = [t.strip() for t in self.args.ablate.split(",") if t.strip()]
        try:
            plan = variants(self.cfg.toggles, wanted)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        outs = run_jobs(self.cfg, plan, self.seeds, max(1, self.args.jobs))
        for o in outs:
            self.emitted += save_run(self.layout, o)
        runs = [(o.result, o.timings) for o in outs]
        emit_report(self.layout, self.cfg, runs, self.emitted)

    def report(self):
        runs = load_runs(self.layout)
        if self.args.seed is not None:
            runs = [r for r in runs if r[0]["seed"] == self.args.seed]
        emit_report(self.layout, self.cfg, runs)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        app = App(cfg, args)
        getattr(app, args.subcommand.replace("-", "_"))()
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NoRunsError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # training and I/O failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
