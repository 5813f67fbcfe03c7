"""``qexrl`` command-line entry point.

Subcommands: gen, index, sft, train, eval, expand, cache.  Every command reads
the same run config (``--config``) so a pipeline is a pure function of that
file and its seeds.  Failures print one line to stderr::

    qexrl: error kind=<kind> code=<n>: <message>

and exit with the code listed in EXIT_CODES.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import fcntl
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import expansion_format as fmt
from .catalog import (generate_catalog, generate_workload, load_catalog,
                      load_workload, save_catalog, save_workload)
from .config import RunConfig, dump_config, load_config
from .errors import (CheckpointError, ConfigError, ContractError, InputError, NumericError,
                     ParseError, SchemaError)
from .evaluation import (EvalReport, LexicalNeighborGenerator, PolicyGenerator, emit_report,
                         evaluate_system, format_table, identity_generator)
from .policy import (Architecture, PolicyModel, Vocab, checkpoint_digest, load_checkpoint,
                     save_checkpoint)
from .search import RelevanceOracle, build_index, load_index, save_index
from .trainer import make_inputs, make_sft_corpus, run_grpo, run_sft

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "missing-file": 4,
    "parse": 5,
    "schema": 6,
    "checkpoint": 7,
    "numeric": 8,
    "input": 9,
    "io": 10,
}

CACHE_VERSION = "qexrl-cache/1"
REPORT_STEM = "report"
log = logging.getLogger("qexrl")


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _classify(exc) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, SchemaError):
        return "schema"
    if isinstance(exc, ParseError):
        return "parse"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, (InputError, ContractError)):
        return "input"
    if isinstance(exc, FileNotFoundError):
        return "missing-file"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def _message(exc) -> str:
    if isinstance(exc, FileNotFoundError) and exc.filename:
        return f"{exc.filename}: no such file"
    if isinstance(exc, OSError) and exc.filename:
        return f"{exc.filename}: {exc.strerror}"
    return " ".join(str(exc).split()) or type(exc).__name__


# -- shared loading --------------------------------------------------------------

def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError("missing-file", f"{path}: no such file")
    return path


def _load_data(cfg: RunConfig, split="train"):
    catalog = load_catalog(_need(cfg.paths.catalog))
    workload = load_workload(_need(getattr(cfg.paths, split)))
    return catalog, workload


def _load_index(cfg, catalog):
    p = Path(cfg.paths.index)
    return load_index(p) if p.exists() else build_index(catalog)


def _load_policy(path) -> PolicyModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return load_checkpoint(path)


def _new_model(cfg: RunConfig, catalog) -> PolicyModel:
    m = cfg.model
    vocab = Vocab.from_words(catalog.vocabulary)
    arch = Architecture(len(vocab), m.d_model, m.n_layers, m.n_heads, m.d_ff, m.context_length)
    return PolicyModel.init(arch, vocab, seed=m.init_seed)


@contextlib.contextmanager
def _locked(directory):
    """Advisory lock so two invocations never write one checkpoint directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise CliError("io", f"{directory}: locked by another qexrl process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _parse_query(text) -> tuple[str, ...]:
    q = tuple(str(text).lower().split())
    if not q:
        raise InputError("empty query")
    return q


def _read_queries(path) -> list[str]:
    lines = _need(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


# -- expansion and cache ----------------------------------------------------------

def expand_query(model, catalog, index, query, temperature=0.5, seed=0, greedy=False,
                 max_input_tokens=160):
    """Parsed expansion for one query string; returns (ExpansionSet | None, ParsedOutput)."""
    q = _parse_query(query)
    gen = PolicyGenerator(model, catalog, index, temperature, greedy=greedy,
                          max_input_tokens=max_input_tokens)
    roll = gen.generate_runs_raw(q, 1, seed)[0]
    parsed = gen.parse(roll)
    return (fmt.to_expansion_set(q, parsed) if parsed.valid else None), parsed


@dataclass
class ExpansionCache:
    checkpoint: str
    created: str
    entries: dict

    def lookup(self, query: str):
        return self.entries.get(query)

    def to_dict(self):
        return {"version": CACHE_VERSION, "checkpoint": self.checkpoint, "created": self.created,
                "entries": self.entries}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = _need(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad cache file: {exc.msg}", path, exc.lineno) from None
        if d.get("version") != CACHE_VERSION:
            raise SchemaError(f"unsupported cache version {d.get('version')!r}", path, 1)
        return cls(d["checkpoint"], d["created"], d["entries"])


def build_cache(model, checkpoint_hash, catalog, index, queries, max_input_tokens=160,
                created=None) -> ExpansionCache:
    entries = {}
    for text in queries:
        exp, _ = expand_query(model, catalog, index, text, greedy=True,
                              max_input_tokens=max_input_tokens)
        entries[text] = [" ".join(e) for e in exp.expansions] if exp else None
    created = created or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return ExpansionCache(checkpoint_hash, created, entries)


# -- commands ---------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args):
    d = cfg.data
    catalog = generate_catalog(d.seed, d.n_items, d.n_categories, d.attrs_per_category,
                               d.vocab_size)
    workload = generate_workload(catalog, d.workload_seed, d.n_queries, d.n_constraints)
    train, held = workload.split(d.n_train)
    for key in ("catalog", "train", "heldout"):
        cfg.path(key).parent.mkdir(parents=True, exist_ok=True)
    save_catalog(catalog, cfg.paths.catalog)
    save_workload(train, cfg.paths.train)
    save_workload(held, cfg.paths.heldout)
    print(json.dumps({"catalog": cfg.paths.catalog, "items": len(catalog),
                      "vocabulary": len(catalog.vocabulary), "train": len(train),
                      "heldout": len(held)}))


def cmd_index(cfg: RunConfig, args):
    catalog = load_catalog(_need(args.catalog or cfg.paths.catalog))
    index = build_index(catalog)
    out = Path(args.out or cfg.paths.index)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, out)
    print(json.dumps({"index": str(out), "docs": index.n_docs, "terms": len(index.postings)}))


def cmd_sft(cfg: RunConfig, args):
    catalog, workload = _load_data(cfg)
    index = _load_index(cfg, catalog)
    t = cfg.train
    model = _new_model(cfg, catalog)
    corpus = make_sft_corpus(catalog, workload, index, t.sft_examples, t.seed,
                             max_input_tokens=t.max_input_tokens)
    curve = run_sft(model, corpus, t.sft_epochs, t.sft_lr, t.sft_batch_size, t.momentum, t.seed,
                    t.max_grad_norm)
    out = cfg.path("sft_checkpoint")
    with _locked(out.parent):
        save_checkpoint(model, out)
        (out.parent / "sft-loss.json").write_text(json.dumps(curve) + "\n")
    print(json.dumps({"checkpoint": str(out), "examples": len(corpus),
                      "final_loss": curve[-1] if curve else None}))


def cmd_train(cfg: RunConfig, args):
    catalog, workload = _load_data(cfg)
    index = _load_index(cfg, catalog)
    oracle = RelevanceOracle(catalog)
    t = cfg.train
    if t.sft:
        model = _load_policy(args.init or cfg.paths.sft_checkpoint)
        if model.vocab != Vocab.from_words(catalog.vocabulary):
            raise CheckpointError(f"{args.init or cfg.paths.sft_checkpoint}: "
                                  "vocabulary does not match the catalog")
    else:
        model = _new_model(cfg, catalog)
    inputs = make_inputs(catalog, workload, index, t.max_context_items, t.max_input_tokens)
    out = cfg.path("checkpoint")
    run_dir = out.parent
    with _locked(run_dir):
        (run_dir / "run-config.ini").write_text(dump_config(cfg), encoding="utf-8")
        metrics = run_grpo(model, t, inputs, index, oracle, catalog.vocabulary,
                           out_dir=run_dir)
        save_checkpoint(model, out)
    last = metrics[-1] if metrics else {}
    print(json.dumps({"checkpoint": str(out), "steps": len(metrics),
                      "config_hash": cfg.digest(), "final": last}))


def cmd_eval(cfg: RunConfig, args):
    catalog, held = _load_data(cfg, "heldout")
    index = _load_index(cfg, catalog)
    oracle = RelevanceOracle(catalog)
    e = cfg.eval
    systems = [("identity", identity_generator),
               ("lexical", LexicalNeighborGenerator(index, catalog, e.lexical_expansions))]
    for ck in args.checkpoints or [cfg.paths.checkpoint]:
        model = _load_policy(ck)
        systems.append((Path(ck).stem, PolicyGenerator(model, catalog, index, e.temperature,
                                                       max_input_tokens=cfg.train.max_input_tokens)))
    reports = []
    for name, gen in systems:
        rep, _ = evaluate_system(gen, held, index, oracle, e.runs, e.k_eval, e.seed, name,
                                 cfg.train.lam, cfg.train.eps_reward, cfg.train.k_rel,
                                 cfg.train.k_size)
        reports.append(rep)
    report = EvalReport(reports)
    out = Path(args.out or cfg.paths.workdir)
    out.mkdir(parents=True, exist_ok=True)
    ext = {"table-text": "txt", "json": "json", "csv": "csv"}
    for f in cfg.formats():
        emit_report(report, out / f"{REPORT_STEM}.{ext[f]}", f)
    sys.stdout.write(format_table(report))


def cmd_expand(cfg: RunConfig, args):
    catalog = load_catalog(_need(cfg.paths.catalog))
    index = _load_index(cfg, catalog)
    model = _load_policy(args.checkpoint or cfg.paths.checkpoint)
    queries = [args.query] if args.query else _read_queries(args.query_file)
    temp = cfg.eval.temperature
    for i, text in enumerate(queries):
        exp, parsed = expand_query(model, catalog, index, text, temp, cfg.eval.seed + i,
                                   args.greedy, cfg.train.max_input_tokens)
        print(json.dumps({
            "query": text, "valid": parsed.valid,
            "violation": parsed.violation.value if parsed.violation else None,
            "expansions": [" ".join(x) for x in exp.expansions] if exp else None,
        }))


def cmd_cache(cfg: RunConfig, args):
    catalog = load_catalog(_need(cfg.paths.catalog))
    index = _load_index(cfg, catalog)
    ck = args.checkpoint or cfg.paths.checkpoint
    model = _load_policy(ck)
    cache = build_cache(model, checkpoint_digest(ck), catalog, index,
                        _read_queries(args.query_file), cfg.train.max_input_tokens)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cache.save(out)
    print(json.dumps({"cache": str(out), "entries": len(cache.entries),
                      "checkpoint": cache.checkpoint}))


COMMANDS = {"gen": cmd_gen, "index": cmd_index, "sft": cmd_sft, "train": cmd_train,
            "eval": cmd_eval, "expand": cmd_expand, "cache": cmd_cache}


# -- argument handling ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qexrl", description="Search-feedback RL for query expansion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="run config file (INI)")
        sp.add_argument("--seed", type=int, help="override the command's seed")
        sp.add_argument("--out", help="output path or directory")
        return sp

    g = common(sub.add_parser("gen", help="generate catalog and workload files"))
    g.add_argument("--items", type=int)
    g.add_argument("--queries", type=int)
    common(sub.add_parser("index", help="build and save the BM25 index")).add_argument(
        "--catalog")
    common(sub.add_parser("sft", help="supervised warm-up on teacher traces"))
    t = common(sub.add_parser("train", help="GRPO from an SFT checkpoint"))
    t.add_argument("--steps", type=int)
    t.add_argument("--temperature", type=float)
    t.add_argument("--init", help="starting checkpoint (default: paths.sft_checkpoint)")
    e = common(sub.add_parser("eval", help="evaluate baselines and checkpoints"))
    e.add_argument("checkpoints", nargs="*")
    e.add_argument("--runs", type=int)
    e.add_argument("--temperature", type=float)
    x = common(sub.add_parser("expand", help="expand one query or a file of queries"))
    x.add_argument("--checkpoint")
    grp = x.add_mutually_exclusive_group(required=True)
    grp.add_argument("--query")
    grp.add_argument("--query-file")
    x.add_argument("--temperature", type=float)
    x.add_argument("--greedy", action="store_true")
    c = common(sub.add_parser("cache", help="precompute greedy expansions for a query list"))
    c.add_argument("--checkpoint")
    c.add_argument("--query-file", required=True)
    return p


def _overrides(args) -> dict:
    o = {}
    cmd = args.command
    if args.seed is not None:
        key = {"gen": "data.seed", "eval": "eval.seed", "expand": "eval.seed"}.get(cmd, "train.seed")
        o[key] = args.seed
    if cmd == "gen":
        if args.out:
            o["paths.workdir"] = args.out
        if args.items is not None:
            o["data.n_items"] = args.items
        if args.queries is not None:
            o["data.n_queries"] = args.queries
    if cmd == "sft" and args.out:
        o["paths.sft_checkpoint"] = args.out
    if cmd == "train" and args.out:
        o["paths.checkpoint"] = args.out
    if getattr(args, "steps", None) is not None:
        o["train.steps"] = args.steps
    if getattr(args, "runs", None) is not None:
        o["eval.runs"] = args.runs
    if getattr(args, "temperature", None) is not None:
        o["train.temperature" if cmd == "train" else "eval.temperature"] = args.temperature
    return o


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.config:
            _need(args.config)
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](cfg, args)
        return 0
    except KeyboardInterrupt:
        print("qexrl: error kind=interrupted code=130: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line error, distinct exit code per kind
        kind = _classify(exc)
        if kind == "internal":
            log.debug("internal error", exc_info=True)
        code = EXIT_CODES[kind]
        print(f"qexrl: error kind={kind} code={code}: {_message(exc)}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
