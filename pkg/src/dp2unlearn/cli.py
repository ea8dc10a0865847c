"""Command-line entry point: corpus generation, the full comparison
experiment (DP2U variants, RFS-R, GA/GD/KL/PO), report rendering and the
convergence probe.

Exit codes: 0 success, 2 configuration error, 3 runtime/sub-run error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import baselines, corpus as corpus_mod, kernels, lm, metrics, pipeline
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import Corpus, Split, generate_corpus, load_corpus, save_corpus, with_forget_ratio
from .dpmlm import SanitizerConfig
from .dpsgd import DpSgdConfig
from .errors import ConfigurationError, Dp2uError, NumericError
from .lm import ModelConfig
from .pipeline import (MECHANISM_DPMLM, MECHANISM_DPSGD, ForgetRequest,
                       PipelineConfig, PipelineState, stage_a, stage_b, stage_c,
                       training_pairs)

ALL_METHODS = ("dp2u-mlm", "dp2u-sgd", "rfsr", "ga", "gd", "kl", "po")

RESULT_COLUMNS = ("method", "ratio", "epsilon", "MU", "FQ_p", "KS_D", "JSD",
                  "W1", "dH", "retain_RL", "forget_RL", "wall_ms_train",
                  "wall_ms_unlearn")


@dataclass
class RunConfig:
    corpus: dict
    model: dict
    train: dict
    finetune: dict
    dpmlm: dict
    dpsgd: dict
    eval: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: list(ALL_METHODS))
    ratios: list = field(default_factory=lambda: [0.05, 0.10])
    seed: int = 0
    out_dir: str = "runs/desk"
    corpus_file: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        missing = {"corpus", "model", "train", "finetune", "dpmlm", "dpsgd"} - set(doc)
        if missing:
            raise ConfigurationError(f"config missing sections: {sorted(missing)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus, "model": self.model, "train": self.train,
            "finetune": self.finetune, "dpmlm": self.dpmlm, "dpsgd": self.dpsgd,
            "eval": self.eval, "methods": self.methods, "ratios": self.ratios,
            "seed": self.seed, "out_dir": self.out_dir,
            "corpus_file": self.corpus_file,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_run_config(out_dir: str = "runs/desk", seed: int = 0) -> RunConfig:
    """The calibrated desk-scale configuration (20 authors x 10 pairs)."""
    return RunConfig(
        corpus={"n_authors": 20, "pairs_per_author": 10, "seed": 7},
        model={"context_k": 12, "embed_dim": 32, "hidden_dim": 64},
        train={"epochs": 12, "lr": 0.1, "batch_size": 8},
        finetune={"epochs": 6, "lr": 0.1, "batch_size": 8},
        dpmlm={"epsilon_per_token": 1.0},
        dpsgd={"clip_norm": 1.0, "epsilon": 1.0, "delta": 1e-4, "lr": 0.0015,
               "batch_size": 32},
        eval={"bins": 20, "max_len": 16},
        seed=seed,
        out_dir=out_dir,
    )


def _load_or_generate_corpus(cfg: RunConfig) -> Corpus:
    if cfg.corpus_file:
        return load_corpus(cfg.corpus_file)
    return generate_corpus(cfg.corpus["n_authors"], cfg.corpus["pairs_per_author"],
                           cfg.corpus["seed"],
                           forget_ratio=cfg.corpus.get("forget_ratio", 0.05))


def _model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, seed=cfg.seed, **cfg.model)


def _pipeline_config(cfg: RunConfig, model_cfg: ModelConfig, mechanism: str,
                     dataset_size: int) -> PipelineConfig:
    dpsgd_cfg = DpSgdConfig(seed=cfg.seed, dataset_size=dataset_size, **cfg.dpsgd)
    sanitizer_cfg = SanitizerConfig(seed=cfg.seed, **cfg.dpmlm)
    return PipelineConfig(model=model_cfg, epochs_e=cfg.train["epochs"],
                          epochs_e_prime=cfg.finetune["epochs"],
                          lr=cfg.train["lr"], batch_size=cfg.train["batch_size"],
                          finetune_lr=cfg.finetune["lr"],
                          finetune_batch_size=cfg.finetune["batch_size"],
                          seed=cfg.seed, mechanism=mechanism,
                          dpsgd_cfg=dpsgd_cfg, sanitizer_cfg=sanitizer_cfg)


def _train_full_model(cfg: RunConfig, corpus: Corpus, out_dir: Path) -> tuple[Checkpoint, float]:
    """Shared full-data (non-DP) model all baselines start from; cached on disk."""
    path = out_dir / "full_data.ckpt"
    if path.exists():
        ckpt = load_checkpoint(path)
        if ckpt.metadata.extra.get("config_hash") == cfg.hash():
            return ckpt, float(ckpt.metadata.extra.get("wall_ms", 0.0))
    model_cfg = _model_config(cfg, len(corpus.vocab))
    train_set = training_pairs(corpus, corpus.profile_pairs())
    t0 = time.perf_counter()
    params = lm.train(lm.init_params(model_cfg), train_set, corpus.vocab,
                      cfg.train["epochs"], lr=cfg.train["lr"],
                      batch_size=cfg.train["batch_size"], seed=cfg.seed)
    wall_ms = (time.perf_counter() - t0) * 1e3
    from .checkpoint import CheckpointMeta, Stage, data_fingerprint
    meta = CheckpointMeta(stage=Stage.FULL_DATA, epochs_trained=cfg.train["epochs"],
                          seed=cfg.seed,
                          data_fingerprint=data_fingerprint(p.id for p in train_set),
                          extra={"config_hash": cfg.hash(), "wall_ms": wall_ms,
                                 "non_dp": True})
    ckpt = Checkpoint.from_params(model_cfg, params, meta)
    save_checkpoint(path, ckpt)
    return ckpt, wall_ms


def _train_rfsr(cfg: RunConfig, corpus: Corpus, ratio: float) -> tuple[Checkpoint, float]:
    rcorpus = with_forget_ratio(corpus, ratio)
    request = ForgetRequest(request_id=0, pair_ids=frozenset(
        p.id for p in rcorpus.subset(Split.FORGET)))
    model_cfg = _model_config(cfg, len(corpus.vocab))
    pipe_cfg = PipelineConfig(model=model_cfg, epochs_e=cfg.train["epochs"],
                              epochs_e_prime=cfg.finetune["epochs"],
                              lr=cfg.train["lr"], batch_size=cfg.train["batch_size"],
                              seed=cfg.seed, mechanism=MECHANISM_DPMLM,
                              sanitizer_cfg=SanitizerConfig(
                                  seed=cfg.seed, **cfg.dpmlm))
    t0 = time.perf_counter()
    ckpt = pipeline.rfsr(rcorpus, [request], pipe_cfg)
    return ckpt, (time.perf_counter() - t0) * 1e3


def _run_dp2u(cfg: RunConfig, corpus: Corpus, ratio: float, mechanism: str,
              out_dir: Path) -> tuple[Checkpoint, float, float, dict]:
    rcorpus = with_forget_ratio(corpus, ratio)
    model_cfg = _model_config(cfg, len(corpus.vocab))
    pipe_cfg = _pipeline_config(cfg, model_cfg, mechanism,
                                dataset_size=len(training_pairs(
                                    rcorpus, rcorpus.profile_pairs())))
    state = PipelineState(out_dir / f"state_{mechanism}_{int(ratio * 100):02d}",
                          pipe_cfg)
    t0 = time.perf_counter()
    stage_a(state, rcorpus)
    stage_b(state, rcorpus)
    wall_train = (time.perf_counter() - t0) * 1e3
    request = ForgetRequest(request_id=0, pair_ids=frozenset(
        p.id for p in rcorpus.subset(Split.FORGET)))
    t0 = time.perf_counter()
    ckpt = stage_c(state, rcorpus, request)
    wall_unlearn = (time.perf_counter() - t0) * 1e3
    info = {"state_dir": str(state.state_dir)}
    return ckpt, wall_train, wall_unlearn, info


def _run_baseline(cfg: RunConfig, corpus: Corpus, ratio: float, method: str,
                  full_ckpt: Checkpoint) -> tuple[object, float, dict]:
    rcorpus = with_forget_ratio(corpus, ratio)
    retain_train = training_pairs(rcorpus, rcorpus.subset(Split.RETAIN))
    forget = rcorpus.subset(Split.FORGET)
    vocab = rcorpus.vocab
    bcfg = baselines.BaselineConfig(method=method, epochs=cfg.finetune["epochs"],
                                    lr=cfg.finetune["lr"],
                                    batch_size=cfg.finetune["batch_size"],
                                    seed=cfg.seed)
    full_params = full_ckpt.params()
    info: dict = {}
    t0 = time.perf_counter()
    try:
        if method == "ga":
            ckpt = baselines.ga_unlearn(full_params, forget, vocab, bcfg)
        elif method == "gd":
            ckpt = baselines.gd_unlearn(full_params, forget, retain_train, vocab, bcfg)
        elif method == "kl":
            ckpt = baselines.kl_unlearn(full_params, forget, retain_train,
                                        full_params, vocab, bcfg)
        else:
            ckpt = baselines.po_unlearn(full_params, forget, retain_train, vocab, bcfg)
        model = ckpt
    except NumericError as exc:
        if exc.last_params is None:
            raise
        # ascent objectives are unbounded; the kept checkpoint is the outcome
        model = exc.last_params
        info["diverged_at_step"] = exc.step
    return model, (time.perf_counter() - t0) * 1e3, info


def _run_cell(cfg: RunConfig, corpus: Corpus, method: str, ratio: float,
              full_ckpt: Checkpoint, full_wall: float,
              rfsr_ckpt: Checkpoint, rfsr_wall: float, out_dir: Path) -> dict:
    rcorpus = with_forget_ratio(corpus, ratio)
    eval_kwargs = {"bins": cfg.eval.get("bins", 20),
                   "max_len": cfg.eval.get("max_len", 16)}
    epsilon = ""
    info: dict = {}
    if method == "rfsr":
        model, wall_train, wall_unlearn = rfsr_ckpt, full_wall, rfsr_wall
    elif method in ("dp2u-mlm", "dp2u-sgd"):
        mechanism = MECHANISM_DPMLM if method == "dp2u-mlm" else MECHANISM_DPSGD
        model, wall_train, wall_unlearn, info = _run_dp2u(cfg, corpus, ratio,
                                                          mechanism, out_dir)
        epsilon = (cfg.dpmlm["epsilon_per_token"] if method == "dp2u-mlm"
                   else cfg.dpsgd["epsilon"])
    else:
        model, wall_unlearn, info = _run_baseline(cfg, corpus, ratio, method,
                                                  full_ckpt)
        wall_train = full_wall
    report = metrics.evaluate(model, rcorpus, rfsr_ckpt,
                              extra={"method": method, "ratio": ratio,
                                     "config_hash": cfg.hash(), **info},
                              **eval_kwargs)
    report.save(out_dir / f"report_{method}_{int(ratio * 100):02d}.json")
    return {
        "method": method, "ratio": ratio, "epsilon": epsilon,
        "MU": report.model_utility, "FQ_p": report.forget_quality_p,
        "KS_D": report.ks_statistic, "JSD": report.jsd,
        "W1": report.wasserstein, "dH": report.entropy_diff,
        "retain_RL": report.retain.rouge_l, "forget_RL": report.forget_rouge_l,
        "wall_ms_train": wall_train, "wall_ms_unlearn": wall_unlearn,
    }


def _cell_worker(args):
    return _run_cell(*args)


def run_experiment(cfg: RunConfig, methods=None, ratios=None, out_dir=None,
                   parallel: int = 1) -> tuple[Path, list[str]]:
    """Run every (method, ratio) cell; returns (results path, failed cells)."""
    methods = list(methods or cfg.methods)
    ratios = [float(r) for r in (ratios or cfg.ratios)]
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise ConfigurationError(f"unknown methods: {unknown}")
    out = Path(os.environ.get("DP2U_OUT", out_dir or cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)

    corpus = _load_or_generate_corpus(cfg)
    for r in ratios:  # validate all ratios before any compute
        corpus_mod.n_forget_authors(r, corpus.n_authors)

    (out / "results.meta.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "config_hash": cfg.hash(),
         "backend": kernels.backend_name()}, indent=1) + "\n")

    full_ckpt, full_wall = _train_full_model(cfg, corpus, out)
    rfsr_by_ratio = {r: _train_rfsr(cfg, corpus, r) for r in ratios}

    cells = [(cfg, corpus, m, r, full_ckpt, full_wall,
              rfsr_by_ratio[r][0], rfsr_by_ratio[r][1], out)
             for r in ratios for m in methods]
    rows, failures = [], []
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [(cell[2], cell[3], pool.submit(_cell_worker, cell))
                       for cell in cells]
            for m, r, fut in futures:
                try:
                    rows.append(fut.result())
                except Dp2uError as exc:
                    print(f"cell ({m}, {r}) failed: {exc}", file=sys.stderr)
                    failures.append(f"{m}@{r}")
    else:
        for cell in cells:
            m, r = cell[2], cell[3]
            try:
                rows.append(_run_cell(*cell))
            except Dp2uError as exc:
                print(f"cell ({m}, {r}) failed: {exc}", file=sys.stderr)
                failures.append(f"{m}@{r}")

    results_path = out / "results.csv"
    with open(results_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return results_path, failures


# --- report rendering --------------------------------------------------------

def _fmt(x, digits=4):
    try:
        v = float(x)
    except (TypeError, ValueError):
        return str(x)
    if v != 0 and abs(v) < 10 ** (-digits):
        return f"{v:.2e}"
    return f"{v:.{digits}f}"


def render_report(results_path: str | Path, out_md: str | Path,
                  out_csv: str | Path | None = None) -> None:
    results_path = Path(results_path)
    if not results_path.exists():
        raise ConfigurationError(f"results file {results_path} not found")
    with open(results_path) as fh:
        rows = list(csv.DictReader(fh))
    lines = ["# Unlearning comparison summary", ""]
    meta = results_path.with_name("results.meta.json")
    if meta.exists():
        lines.append(f"Config hash: `{json.loads(meta.read_text())['config_hash']}`")
        lines.append("")
    if not rows:
        print("warning: results file has no data rows", file=sys.stderr)
        lines.append("_No results._")
    else:
        ratios = sorted({float(r["ratio"]) for r in rows})
        methods = list(dict.fromkeys(r["method"] for r in rows))

        def best(ratio, col, maximize=True):
            cands = [r for r in rows
                     if float(r["ratio"]) == ratio and r["method"] != "rfsr"]
            if not cands:
                return None
            pick = max(cands, key=lambda r: float(r[col])) if maximize else \
                min(cands, key=lambda r: float(r[col]))
            return pick["method"]

        header = "| Method |" + "".join(
            f" MU ({int(r * 100)}%) | FQ ({int(r * 100)}%) |" for r in ratios)
        sep = "|---|" + "---|---|" * len(ratios)
        lines += ["## Forget quality and model utility",
                  "(best non-reference value per column in bold; RFS-R is the"
                  " benchmark and excluded from ranking)", "", header, sep]
        for m in methods:
            cells = [f"| {m} |"]
            for r in ratios:
                row = next((x for x in rows
                            if x["method"] == m and float(x["ratio"]) == r), None)
                if row is None:
                    cells.append(" - | - |")
                    continue
                mu, fq = _fmt(row["MU"]), _fmt(row["FQ_p"])
                if m == best(r, "MU"):
                    mu = f"**{mu}**"
                if m == best(r, "FQ_p"):
                    fq = f"**{fq}**"
                cells.append(f" {mu} | {fq} |")
            lines.append("".join(cells))

        lines += ["", "## Distribution statistics vs RFS-R on the forget set", "",
                  "| Method | Ratio | KS D | JSD | W1 | dH | retain RL | forget RL |",
                  "|---|---|---|---|---|---|---|---|"]
        for row in rows:
            lines.append(
                f"| {row['method']} | {row['ratio']} | {_fmt(row['KS_D'])} | "
                f"{_fmt(row['JSD'])} | {_fmt(row['W1'])} | {_fmt(row['dH'])} | "
                f"{_fmt(row['retain_RL'])} | {_fmt(row['forget_RL'])} |")

        lines += ["", "## Wall clock", "",
                  "| Method | Ratio | train ms | unlearn ms |",
                  "|---|---|---|---|"]
        for row in rows:
            lines.append(f"| {row['method']} | {row['ratio']} | "
                         f"{_fmt(row['wall_ms_train'], 0)} | "
                         f"{_fmt(row['wall_ms_unlearn'], 0)} |")
    Path(out_md).write_text("\n".join(lines) + "\n")
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "ratio", "MU", "FQ_p"])
            for row in rows:
                writer.writerow([row["method"], row["ratio"], row["MU"], row["FQ_p"]])


# --- argument parsing ----------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dp2unlearn",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate the synthetic QA corpus")
    g.add_argument("--authors", type=int, required=True)
    g.add_argument("--pairs-per-author", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--forget-ratio", type=float, default=0.05)

    e = sub.add_parser("run-experiment", help="run the comparison protocol")
    e.add_argument("--config", help="RunConfig JSON (defaults to the desk config)")
    e.add_argument("--methods", help="comma-separated subset of "
                                     + ",".join(ALL_METHODS))
    e.add_argument("--ratios", help="comma-separated forget ratios")
    e.add_argument("--out", help="output directory (env DP2U_OUT overrides)")
    e.add_argument("--parallel", type=int, default=1,
                   help="run independent (method, ratio) cells in N processes")
    e.add_argument("--seed", type=int, help="override the config seed")

    r = sub.add_parser("report", help="render results.csv into markdown + CSV")
    r.add_argument("--in", dest="results", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--csv", help="also write the (method, ratio, MU, FQ) CSV")

    p = sub.add_parser("probe-convergence",
                       help="first epoch at which training ROUGE crosses a threshold")
    p.add_argument("--config", help="RunConfig JSON (defaults to the desk config)")
    p.add_argument("--max-epochs", type=int, default=40)
    p.add_argument("--threshold", type=float, default=0.95)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-corpus":
            corpus = generate_corpus(args.authors, args.pairs_per_author,
                                     args.seed, forget_ratio=args.forget_ratio)
            save_corpus(args.out, corpus)
            profile = len(corpus.profile_pairs())
            print(f"wrote {args.out}: {profile} profile pairs "
                  f"({corpus.n_authors} authors x {corpus.pairs_per_author}), "
                  f"{len(corpus.pairs) - profile} aux pairs, "
                  f"vocab {len(corpus.vocab)}")
        elif args.command == "run-experiment":
            cfg = (RunConfig.from_file(args.config) if args.config
                   else default_run_config())
            if args.seed is not None:
                cfg.seed = args.seed
            methods = args.methods.split(",") if args.methods else None
            ratios = ([float(x) for x in args.ratios.split(",")]
                      if args.ratios else None)
            path, failures = run_experiment(cfg, methods=methods, ratios=ratios,
                                            out_dir=args.out,
                                            parallel=args.parallel)
            print(f"results written to {path}")
            if failures:
                print(f"failed cells: {failures}", file=sys.stderr)
                return 3
        elif args.command == "report":
            render_report(args.results, args.out, args.csv)
            print(f"summary written to {args.out}")
        elif args.command == "probe-convergence":
            cfg = (RunConfig.from_file(args.config) if args.config
                   else default_run_config())
            corpus = _load_or_generate_corpus(cfg)
            model_cfg = _model_config(cfg, len(corpus.vocab))
            pipe_cfg = PipelineConfig(
                model=model_cfg, epochs_e=cfg.train["epochs"],
                epochs_e_prime=cfg.finetune["epochs"], lr=cfg.train["lr"],
                batch_size=cfg.train["batch_size"], seed=cfg.seed,
                mechanism=MECHANISM_DPMLM,
                sanitizer_cfg=SanitizerConfig(seed=cfg.seed, **cfg.dpmlm))
            epoch = pipeline.convergence_probe(corpus, pipe_cfg,
                                               max_epochs=args.max_epochs,
                                               threshold=args.threshold)
            if epoch is None:
                print(f"training ROUGE did not reach {args.threshold} within "
                      f"{args.max_epochs} epochs")
            else:
                print(f"training ROUGE first crossed {args.threshold} at epoch {epoch}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Dp2uError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
