"""Command line entry point.

Every subcommand reads the run configuration (``--config`` file, then flag
overrides), checks its inputs, writes its artifacts under ``workdir`` and
echoes the configuration into each artifact.

Exit codes: 0 success, 1 invalid configuration or missing input, 2 runtime
failure, 3 selftest failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from .config import FIELD_TYPES, ConfigError, RunConfig, load_config
from .tracesim import TraceError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

ARTIFACTS = {
    "corpus_csv": "corpus.csv",
    "corpus_bin": "corpus.bin",
    "encoder": "encoder.bin",
    "labels": "labels.csv",
    "predictor": "predictor.bin",
    "predictor_report": "predictor_report.json",
    "healed": "healed.bin",
    "heal_alignment": "heal_alignment.csv",
    "heal_loss": "heal_loss.csv",
    "store": "store.emst",
    "query": "query.jsonl",
    "eval": "eval.csv",
    "sim_csv": "sim.csv",
    "sim_jsonl": "sim.jsonl",
}

FLAG_ALIASES = {"n_superficial": ["--superficial-n"]}


class InputError(ValueError):
    pass


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise InputError(f"missing input {path}; run `exitembed {producer}` first (same --workdir)")
    return path


def _artifact(cfg: RunConfig, key: str) -> Path:
    return cfg.path(ARTIFACTS[key])


def _log(msg: str) -> None:
    print(msg, flush=True)


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> None:
    from .datagen import generate, save_corpus

    corpus = generate(
        cfg.n_items, noise_low=cfg.noise_low, noise_high=cfg.noise_high, seed=cfg.stage_seed("gen-data"),
        mixing_seed=cfg.encoder_seed, nuisance_scale=cfg.nuisance_scale, noise_floor=cfg.noise_floor,
    )
    save_corpus(corpus, _artifact(cfg, "corpus_csv"), _artifact(cfg, "corpus_bin"), echo=cfg.echo())
    _log(f"wrote {len(corpus)} items to {_artifact(cfg, 'corpus_csv')} (+ .bin)")


def _corpus(cfg):
    from .datagen import load_corpus

    return load_corpus(_require(_artifact(cfg, "corpus_bin"), "gen-data"))


def cmd_label_exits(cfg: RunConfig, args) -> None:
    from .encoder import init_encoder, save_checkpoint
    from .exit_oracle import exit_histogram, label_exits, save_labels

    corpus = _corpus(cfg)
    stack = init_encoder(cfg.encoder_config())
    save_checkpoint(stack, _artifact(cfg, "encoder"), echo=cfg.echo())
    labels = label_exits(stack, corpus, cfg.store_modality)
    save_labels(labels, _artifact(cfg, "labels"), echo=cfg.echo())
    _log(f"exit histogram: {exit_histogram(labels)}")


def _stack(cfg, key="encoder", producer="label-exits"):
    from .encoder import load_checkpoint

    return load_checkpoint(_require(_artifact(cfg, key), producer))


def _labels(cfg):
    from .exit_oracle import load_labels

    return load_labels(_require(_artifact(cfg, "labels"), "label-exits"))


def cmd_train_predictor(cfg: RunConfig, args) -> None:
    from .predictor import report_dict, save_predictor, superficial_embed, train_predictor

    corpus, stack, labels = _corpus(cfg), _stack(cfg), _labels(cfg)
    if [lab.item_id for lab in labels] != [int(i) for i in corpus.ids]:
        raise InputError("labels do not match the corpus item ids; re-run label-exits")
    feats = superficial_embed(stack, cfg.store_modality, corpus.raw[cfg.store_modality], cfg.n_superficial)
    model, report = train_predictor(
        feats, labels, cfg.n_superficial, cfg.num_layers, hidden=cfg.predictor_hidden,
        learning_rate=cfg.predictor_lr, epochs=cfg.predictor_epochs, seed=cfg.stage_seed("train-predictor") & 0xFFFFFFFF,
    )
    save_predictor(model, _artifact(cfg, "predictor"), echo=cfg.echo())
    rep = report_dict(report)
    _artifact(cfg, "predictor_report").write_text(
        json.dumps({"config": cfg.as_dict(), "report": rep}, sort_keys=True) + "\n"
    )
    _log("predictor: " + json.dumps(rep, sort_keys=True))


def cmd_heal(cfg: RunConfig, args) -> None:
    from .encoder import save_checkpoint
    from .exit_oracle import exit_histogram
    from .healing import HealConfig, heal, make_schedule, write_heal_csvs

    corpus, stack, labels = _corpus(cfg), _stack(cfg), _labels(cfg)
    schedule = make_schedule(exit_histogram(labels), cfg.num_layers)
    hcfg = HealConfig(cfg.heal_epochs, cfg.heal_lr, cfg.heal_min_pool, cfg.store_modality)
    healed, report = heal(stack, corpus, labels, schedule, hcfg)
    save_checkpoint(healed, _artifact(cfg, "healed"), echo=cfg.echo())
    write_heal_csvs(report, _artifact(cfg, "heal_alignment"), _artifact(cfg, "heal_loss"), echo=cfg.echo())
    if report.noop:
        _log("healing skipped (LoRA rank 0 or zero epochs)")
    else:
        _log(f"healed with pivot {schedule.pivot}, steps {schedule.steps}")


def cmd_embed(cfg: RunConfig, args) -> None:
    from .predictor import load_predictor
    from .scheduler import LayerStore, layers_saved, run_embedding_pipeline
    from .store import EmbeddingStore, locked

    corpus = _corpus(cfg)
    model_path = _require(_artifact(cfg, "healed"), "heal")
    predictor = load_predictor(_require(_artifact(cfg, "predictor"), "train-predictor"))
    result = run_embedding_pipeline(
        LayerStore(model_path), corpus, predictor, cfg.n_superficial, cfg.max_batch,
        modality=cfg.store_modality, pipeline=cfg.pipeline, inject_load_s=cfg.inject_load_s(),
        inject_compute_s=cfg.inject_compute_s(), quantize_superficial=cfg.quantize_superficial,
    )
    path = _artifact(cfg, "store")
    with locked(path):
        for stale in (path, path.with_name(path.name + ".tmp")):
            stale.unlink(missing_ok=True)
        store = EmbeddingStore(path, cfg.num_layers, cfg.embedding_encoding, cfg.cache_encoding, echo=cfg.echo())
        store.put_many(result.records, result.snapshots)
    hist = dict(sorted(Counter(r.exit for r in result.records).items()))
    saved = layers_saved(result.records, cfg.num_layers, cfg.n_superficial)
    _log(f"embedded {len(result.records)} items; predicted exits {hist}; layers saved {saved:.3f}")
    _log("pipeline: " + json.dumps(result.stats.as_dict(), sort_keys=True))


def cmd_query(cfg: RunConfig, args) -> None:
    from .retrieval import query, write_report
    from .store import EmbeddingStore, locked

    corpus = _corpus(cfg)
    stack = _stack(cfg, "healed", "heal")
    path = _require(_artifact(cfg, "store"), "embed")
    n = len(corpus) if cfg.n_queries == 0 else min(cfg.n_queries, len(corpus))
    with locked(path):
        store = EmbeddingStore(path)
        results = [query(stack, store, corpus.raw[cfg.query_modality][k], cfg.query_modality, cfg.k1, cfg.k2)
                   for k in range(n)]
    ids = [int(i) for i in corpus.ids[:n]]
    summary = write_report(_artifact(cfg, "query"), ids, results, truth=ids, echo={"config": cfg.as_dict()},
                           timings=cfg.timings)
    _log("query: " + json.dumps(summary, sort_keys=True))


def cmd_eval(cfg: RunConfig, args) -> None:
    from .retrieval import recall_at

    path = _require(_artifact(cfg, "query"), "query")
    final, coarse, truth = [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{lineno}: not JSON ({exc})") from None
        if row.get("kind") == "query":
            if "truth" not in row:
                raise InputError(f"{path}:{lineno}: query row has no ground truth")
            final.append(row["ranking"])
            coarse.append(row["coarse_ranking"])
            truth.append(row["truth"])
    if not truth:
        raise InputError(f"{path}: no query rows")
    out = _artifact(cfg, "eval")
    with open(out, "w") as fh:
        fh.write(f"# config: {cfg.echo()}\n")
        fh.write("k,coarse_recall,final_recall\n")
        for k in (1, 5, 10):
            fh.write(f"{k},{recall_at(coarse, truth, k)!r},{recall_at(final, truth, k)!r}\n")
    _log(out.read_text().split("\n", 1)[1].rstrip())


def cmd_simulate(cfg: RunConfig, args) -> None:
    from . import tracesim
    from .exit_oracle import exit_histogram

    if args.labels:
        from .exit_oracle import load_labels

        dist = exit_histogram(load_labels(_require(Path(args.labels), "label-exits")))
    elif _artifact(cfg, "labels").is_file():
        dist = exit_histogram(_labels(cfg))
    else:
        from .datagen import generate
        from .encoder import init_encoder
        from .exit_oracle import label_exits

        corpus = generate(cfg.n_items, seed=cfg.stage_seed("gen-data"), mixing_seed=cfg.encoder_seed,
                          nuisance_scale=cfg.nuisance_scale, noise_floor=cfg.noise_floor)
        dist = exit_histogram(label_exits(init_encoder(cfg.encoder_config()), corpus, cfg.store_modality))
    if args.trace:
        trace = tracesim.load_trace(_require(Path(args.trace), "simulate"))
    else:
        trace = tracesim.synthetic_trace(cfg.sim_items, cfg.sim_rate, cfg.stage_seed("trace"))
    profile = tracesim.load_profile(_require(Path(args.profile), "simulate")) if args.profile else tracesim.DeviceProfile()
    try:
        if args.policies:
            policies = [tracesim.Policy.parse(p) for p in args.policies.split(",")]
        else:
            policies = tracesim.default_policies(dist, cfg.sim_superficial, cfg.num_layers)
        for p in policies:
            p.validate(cfg.num_layers)
    except ValueError as exc:
        raise InputError(f"--policies: {exc}") from None
    rows = tracesim.compare(
        policies, trace, profile, dist, num_layers=cfg.num_layers,
        horizon=None if cfg.sim_horizon < 0 else cfg.sim_horizon,
        seed=cfg.stage_seed("simulate"), max_batch=cfg.sim_max_batch,
    )
    tracesim.write_csv(rows, _artifact(cfg, "sim_csv"), echo=cfg.echo())
    tracesim.write_jsonl(rows, _artifact(cfg, "sim_jsonl"), echo={"config": cfg.as_dict()})
    for row in rows:
        rep = row["report"]
        _log(f"{row['policy']:>12}: energy {rep.total_energy_j:.2f} J, charges {rep.charges}, "
             f"throughput {rep.throughput:.3f}/s, dropped {rep.dropped}")


def cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(verbose=True)
    return EXIT_SELFTEST if failures else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "label-exits": cmd_label_exits,
    "train-predictor": cmd_train_predictor,
    "heal": cmd_heal,
    "embed": cmd_embed,
    "query": cmd_query,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    for name, kind in FIELD_TYPES.items():
        flags = ["--" + name.replace("_", "-")] + FLAG_ALIASES.get(name, [])
        hint = "on|off" if kind == "bool" else kind.upper()
        common.add_argument(*flags, dest=name, metavar=hint, default=None)
    parser = argparse.ArgumentParser(prog="exitembed", description="Early-exit embedding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "simulate":
            p.add_argument("--trace", help="trace CSV (timestamp,item_id,modality); synthetic if omitted")
            p.add_argument("--profile", help="device profile key=value file")
            p.add_argument("--policies", help="comma list of full, fixed:E, pre-exit:N")
            p.add_argument("--labels", help="labels CSV for the exit distribution")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    overrides = {k: getattr(args, k) for k in FIELD_TYPES if getattr(args, k, None) is not None}
    try:
        cfg = load_config(args.config, overrides)
        Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        code = COMMANDS[args.command](cfg, args)
    except (InputError, ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure: report, do not trace
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
