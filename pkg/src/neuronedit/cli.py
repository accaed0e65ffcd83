"""``neuronedit`` command line.

Every command writes its outputs plus one ``run_manifest.json`` into
``--out-dir``. JSON is canonical; CSV files mirror it for plotting.

Exit status: 0 success, 2 invalid input (bad flags, unreadable or malformed
files), 1 failure while running.

Dataset schemas (JSON lines, one object per line):
  paired/1  male_sentence, female_sentence, category, word, variant,
            male_alternates[], female_alternates[]
  stereo/1  stereotype, anti_stereotype, nonsensical, domain
  task/1    kind (mcq|arithmetic), prompt, choices[] + answer_index | answer_string
Plan files carry ``version: 1``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import datasets as ds
from . import synthetic
from .config import ConfigError, ModelConfig, NeuronId
from .editing import EditError, cna_compare
from .engine import forward
from .ine import EditPlan, IneError, IneParams, apply_plan, ine_select
from .metrics import arithmetic_accuracy, entropy_difference_eval, mcq_accuracy, stereoset_eval
from .parallel import default_threads
from .tokenizer import Tokenizer, TokenizerError
from .weights import TransformerWeights, WeightsError, export_weights, load_weights

log = logging.getLogger("neuronedit")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
TOP_HEADS = 20


class InputError(Exception):
    """Raised for anything the user can fix by changing arguments or files."""


# ---------------------------------------------------------------------------
# io helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, NeuronId):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])


class Run:
    """Collects the facts a run manifest records."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.model_hash: str | None = None
        self.dataset_hashes: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.status = "ok"

    def dataset(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"no such file: {p}")
        self.dataset_hashes[p.name] = _sha256(p)
        return p

    def json(self, name: str, obj) -> None:
        write_json(self.out_dir / name, obj)
        self.outputs.append(name)

    def csv(self, name: str, header: list[str], rows) -> None:
        write_csv(self.out_dir / name, header, rows)
        self.outputs.append(name)

    def manifest(self) -> None:
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
        write_json(self.out_dir / "run_manifest.json", {
            "command": self.args.command,
            "config_path": getattr(self.args, "config", None),
            "model_hash": self.model_hash,
            "dataset_hashes": self.dataset_hashes,
            "seed": self.args.seed,
            "threads": self.args.threads,
            "timestamp": when.isoformat(),
            "outputs": sorted(self.outputs),
            "status": self.status,
            **self.extra,
        })


def _load_model(run: Run) -> TransformerWeights:
    args = run.args
    if not args.model:
        raise InputError("--model is required")
    try:
        config = ModelConfig.from_json(args.config) if args.config else None
        weights = load_weights(args.model, config)
    except (OSError, WeightsError, ConfigError, ValueError, KeyError) as e:
        raise InputError(f"cannot load model: {e}") from e
    run.model_hash = weights.hash()
    return weights


def _load_tokenizer(args) -> Tokenizer:
    if not args.tokenizer:
        raise InputError("--tokenizer is required")
    try:
        return Tokenizer.from_dir(args.tokenizer)
    except (OSError, TokenizerError, ValueError, KeyError) as e:
        raise InputError(f"cannot load tokenizer: {e}") from e


def _read(run: Run, reader, path, what: str):
    if not path:
        raise InputError(f"{what} is required")
    try:
        items = reader(run.dataset(path))
    except ds.DatasetError as e:
        raise InputError(str(e)) from e
    if not items:
        raise InputError(f"{path} is empty")
    return items


def _sampled(run: Run, reader):
    items = _read(run, reader, run.args.dataset, "--dataset")
    try:
        return ds.sample_cases(items, run.args.sample, run.args.seed)
    except ds.DatasetError as e:
        raise InputError(str(e)) from e


def _pairs(run: Run):
    return _sampled(run, ds.read_pairs)


def _genders(text: str) -> tuple[str, str]:
    parts = tuple(p.strip() for p in text.split(","))
    if len(parts) != 2 or not all(parts) or parts[0] == parts[1]:
        raise argparse.ArgumentTypeError("expected two distinct comma-separated terms, e.g. man,woman")
    return parts


def _neuron_ids(text: str) -> list[NeuronId]:
    try:
        return [NeuronId.parse(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise InputError(str(e)) from e


# ---------------------------------------------------------------------------
# commands


def cmd_commonwords(run: Run) -> None:
    args = run.args
    try:
        lists = ds.load_wordlists(args.wordlists) if args.wordlists else ds.sample_wordlists()
        pairs = ds.generate_commonwords(lists, args.genders)
    except (OSError, ds.DatasetError) as e:
        raise InputError(str(e)) from e
    ds.write_jsonl(run.out_dir / "commonwords.jsonl", pairs)
    run.outputs.append("commonwords.jsonl")


def cmd_eval_bias(run: Run) -> None:
    weights, tok = _load_model(run), _load_tokenizer(run.args)
    pairs = _pairs(run)
    m = entropy_difference_eval(weights, tok, pairs, run.args.threads)
    run.json("bias_metrics.json", m.to_dict())
    keys = ["mean_abs_entropy_diff", "signed_mean_entropy_diff", "proportion_male_lower", "n_pairs"]
    run.csv("bias_categories.csv", ["category", *keys],
            ([cat, *(v[k] for k in keys)] for cat, v in sorted(m.per_category.items())))
    run.csv("bias_pairs.csv", ["index", "category", "male_entropy", "female_entropy", "diff"],
            ([p.index, p.category, p.male_entropy, p.female_entropy, p.diff] for p in m.pairs))


def cmd_eval_stereo(run: Run) -> None:
    weights, tok = _load_model(run), _load_tokenizer(run.args)
    cases = _sampled(run, ds.read_stereo)
    m = stereoset_eval(weights, tok, cases, run.args.threads)
    run.json("stereo_metrics.json", {**m.to_dict(), "n_cases": len(cases)})
    run.csv("stereo_metrics.csv", ["lms", "ss", "icat", "n_cases"], [[m.lms, m.ss, m.icat, len(cases)]])


def cmd_eval_tasks(run: Run) -> None:
    weights, tok = _load_model(run), _load_tokenizer(run.args)
    cases = _sampled(run, ds.read_tasks)
    out = {}
    for kind, fn in (("mcq", mcq_accuracy), ("arithmetic", arithmetic_accuracy)):
        sub = [c for c in cases if c.kind == kind]
        if sub:
            out[kind] = {"accuracy": fn(weights, tok, sub, run.args.threads), "n_cases": len(sub)}
    run.json("task_metrics.json", out)
    run.csv("task_metrics.csv", ["kind", "accuracy", "n_cases"],
            ([k, v["accuracy"], v["n_cases"]] for k, v in sorted(out.items())))


def _head_matrix_rows(m: np.ndarray):
    for l, row in enumerate(m):
        yield [l, *(float(x) for x in row)]


def _top_heads(m: np.ndarray, n: int) -> list[dict]:
    H = m.shape[1]
    return [{"layer": int(i // H), "head": int(i % H), "score": float(m.reshape(-1)[i])} for i in attr.rank(m, n)]


def cmd_heads(run: Run) -> None:
    args = run.args
    weights, tok = _load_model(run), _load_tokenizer(args)
    pairs = _pairs(run)
    c = weights.config
    header = ["layer", *(f"h{j}" for j in range(c.n_heads))]
    methods = ("logit", "causal") if args.method == "both" else (args.method,)
    report: dict = {"n_layers": c.n_layers, "n_heads": c.n_heads}
    tops = {}
    for method in methods:
        if method == "logit":
            try:
                cases = attr.cases_from_pairs(weights, tok, pairs, args.genders)
            except ds.DatasetError as e:
                raise InputError(str(e)) from e
            m = attr.aggregate_head_logit_scores(weights, cases, args.threads)
        else:
            m = attr.head_causal_scores(weights, tok, pairs, args.threads)
        tops[method] = _top_heads(m, TOP_HEADS)
        report[method] = {"matrix": m.tolist(), "top": tops[method]}
        run.csv(f"heads_{method}.csv", header, _head_matrix_rows(m))
    if len(methods) == 2:
        both = {(h["layer"], h["head"]) for h in tops["logit"]} & {(h["layer"], h["head"]) for h in tops["causal"]}
        report["intersection"] = [{"layer": l, "head": j} for l, j in sorted(both)]
    run.json("heads.json", report)


def _neuron_rows(reports: list[attr.NeuronReport], tok: Tokenizer):
    # CSV cells use vocabulary pieces: decoded tokens can hold NUL and other control bytes
    for r in reports:
        d = r.to_dict(tok)
        yield [d["id"], d["role"], d["dominant_position"], d.get("importance"), d.get("query_score"),
               " ".join(tok.piece(t["id"]) for t in d.get("top_tokens", [])),
               " ".join(tok.piece(t["id"]) for t in d.get("last_tokens", []))]


def cmd_neurons(run: Run) -> None:
    args = run.args
    if args.n < 1:
        raise InputError("-n must be at least 1")
    weights, tok = _load_model(run), _load_tokenizer(args)
    if args.dataset:
        pairs = _pairs(run)
        try:
            cases = attr.cases_from_pairs(weights, tok, pairs, args.genders)
        except ds.DatasetError as e:
            raise InputError(str(e)) from e
        agg = attr.Aggregate.from_scores(attr.score_cases(weights, cases, args.threads))
        ffn = attr._reports(weights, agg, "ffn", args.n, args.n_top)
        att = attr._reports(weights, agg, "attn", args.n, args.n_top)
        query = attr.aggregate_query_neurons(weights, agg, att, args.n, args.n_top)
        source = {"dataset": Path(args.dataset).name, "n_cases": len(cases)}
    else:
        if args.prompt is None or args.target is None:
            raise InputError("give --prompt and --target, or --dataset")
        ids = tok.encode(args.target, add_bos=False)
        if len(ids) != 1:
            raise InputError(f"target {args.target!r} is not a single token (encodes to {len(ids)})")
        tokens = tok.encode(args.prompt)
        if len(tokens) > weights.config.context_length:
            raise InputError("prompt longer than the model context")
        trace = forward(weights, tokens)
        value = attr.top_value_neurons(trace, ids[0], args.n, args.n_top)
        ffn, att = value.ffn, value.attn
        query = attr.query_neuron_scores(weights, trace, att, args.n, args.n_top)
        source = {"prompt": args.prompt, "target": args.target, "target_id": ids[0]}
    run.json("neurons.json", {
        **source,
        "ffn_value": [r.to_dict(tok) for r in ffn],
        "attn_value": [r.to_dict(tok) for r in att],
        "ffn_query": [r.to_dict(tok) for r in query],
    })
    run.csv("neurons.csv", ["id", "role", "dominant_position", "importance", "query_score", "top_tokens", "last_tokens"],
            _neuron_rows(ffn + att + query, tok))


def cmd_ine(run: Run) -> None:
    args = run.args
    weights, tok = _load_model(run), _load_tokenizer(args)
    pairs = _pairs(run)
    probe = _read(run, ds.read_tasks, args.probe, "--probe")
    params = IneParams(n_per_role=args.n_per_role, budget=args.budget, capability_drop_threshold=args.threshold,
                       bias_sample_size=args.bias_sample, seed=args.seed, genders=args.genders)
    try:
        plan = ine_select(weights, tok, pairs, probe, params, args.threads)
    except ds.DatasetError as e:
        raise InputError(str(e)) from e
    except IneError as e:
        if e.plan is not None:
            run.json("plan.json", e.plan.to_dict())
        raise
    run.json("plan.json", plan.to_dict())
    run.csv("candidates.csv", ["neuron", "source", "importance", "dominant_position", "causal_bias_delta",
                               "capability_delta", "filtered", "reason"],
            ([str(c.neuron), c.source, c.importance, c.dominant_position, c.causal_bias_delta,
              c.capability_delta, c.filtered, c.reason] for c in plan.candidates))


def _load_plan(run: Run, path) -> EditPlan:
    try:
        return EditPlan.load(run.dataset(path))
    except (OSError, ValueError, KeyError, TypeError, IneError) as e:
        raise InputError(f"cannot read plan: {e}") from e


def cmd_apply(run: Run) -> None:
    args = run.args
    if not args.plan:
        raise InputError("--plan is required")
    weights = _load_model(run)
    plan = _load_plan(run, args.plan)
    try:
        edited = apply_plan(weights, plan, check_hash=not args.ignore_hash)
    except IneError as e:
        raise InputError(str(e)) from e
    except EditError as e:
        raise InputError(str(e)) from e
    export_weights(edited, run.out_dir / "model.safetensors")
    run.outputs.append("model.safetensors")
    provenance = {
        "source_model_hash": run.model_hash,
        "edited_model_hash": edited.hash(),
        "plan": Path(args.plan).name,
        "plan_sha256": run.dataset_hashes[Path(args.plan).name],
        "masked": [str(n) for n in plan.neurons],
    }
    run.json("provenance.json", provenance)
    run.extra["edited_model_hash"] = provenance["edited_model_hash"]


def cmd_cna(run: Run) -> None:
    args = run.args
    weights, tok = _load_model(run), _load_tokenizer(args)
    if bool(args.plan) == bool(args.mask):
        raise InputError("give exactly one of --plan or --mask")
    mask = _load_plan(run, args.plan).neurons if args.plan else _neuron_ids(args.mask)
    watch = _neuron_ids(args.watch or "")
    if args.prompt is None:
        raise InputError("--prompt is required")
    try:
        rows = cna_compare(weights, mask, args.prompt, watch, tok, args.n_top)
    except EditError as e:
        raise InputError(str(e)) from e
    run.json("cna.json", {
        "prompt": args.prompt,
        "masked": [str(n) for n in mask],
        "rows": [{"neuron": str(r.neuron), "coef_before": r.coef_before, "coef_after": r.coef_after,
                  "sign_flipped": r.sign_flipped, "top_tokens": [tok.token_str(t) for t in r.top_tokens]}
                 for r in rows],
    })
    run.csv("cna.csv", ["neuron", "coef_before", "coef_after", "sign_flipped", "top_tokens"],
            ([str(r.neuron), r.coef_before, r.coef_after, r.sign_flipped, " ".join(tok.piece(t) for t in r.top_tokens)]
             for r in rows))


def cmd_make_desk(run: Run) -> None:
    """Write a planted-bias demo model, its tokenizer and matching datasets."""
    tok = synthetic.desk_tokenizer()
    if run.args.kind == "planted-bias":
        planted = synthetic.planted_bias_model(tok, run.args.seed)
        weights = planted.weights
        run.extra["planted"] = {"bias_neuron": str(planted.bias_neuron), "general_neuron": str(planted.general_neuron),
                                "general_attn_neuron": str(planted.general_attn_neuron)}
    elif run.args.kind == "symmetric":
        weights = synthetic.symmetric_model(tok, run.args.seed)
    else:
        chain = synthetic.chain_model(tok, run.args.seed)
        weights = chain.weights
        run.extra["planted"] = {"upstream": str(chain.upstream), "downstream": str(chain.downstream)}
    export_weights(weights, run.out_dir / "model.safetensors")
    weights.config.save(run.out_dir / "config.json")
    tok.save(run.out_dir / "tokenizer")
    ds.write_jsonl(run.out_dir / "commonwords.jsonl", ds.generate_commonwords(ds.sample_wordlists(), synthetic.DESK_GENDERS))
    ds.write_jsonl(run.out_dir / "probe.jsonl", synthetic.marker_probe(100, run.args.seed))
    run.outputs += ["model.safetensors", "config.json", "tokenizer", "commonwords.jsonl", "probe.jsonl"]
    run.model_hash = weights.hash()


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, model: bool = True, tokenizer: bool = True) -> None:
    if model:
        p.add_argument("--model", help="weight container (.safetensors layout)")
        p.add_argument("--config", help="model config JSON, if the container does not embed one")
    if tokenizer:
        p.add_argument("--tokenizer", help="directory with vocab.json and merges.txt")
    p.add_argument("--out-dir", required=True, help="directory for outputs and run_manifest.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: available cores)")


def _dataset(p: argparse.ArgumentParser, help: str) -> None:
    p.add_argument("--dataset", help=help)
    p.add_argument("--sample", type=int, default=None, metavar="N", help="seeded subset of N cases")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuronedit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("commonwords", help="generate paired/1 prompts from word lists")
    _common(p, model=False, tokenizer=False)
    p.add_argument("--wordlists", help="directory of <category>.txt files (default: bundled sample)")
    p.add_argument("--genders", type=_genders, default=ds.DEFAULT_GENDERS)
    p.set_defaults(func=cmd_commonwords)

    p = sub.add_parser("eval-bias", help="entropy difference and proportion on paired/1 data")
    _common(p)
    _dataset(p, "paired/1 JSON lines")
    p.set_defaults(func=cmd_eval_bias)

    p = sub.add_parser("eval-stereo", help="LMS, SS and ICAT on stereo/1 data")
    _common(p)
    _dataset(p, "stereo/1 JSON lines")
    p.set_defaults(func=cmd_eval_stereo)

    p = sub.add_parser("eval-tasks", help="accuracy on task/1 data")
    _common(p)
    _dataset(p, "task/1 JSON lines")
    p.set_defaults(func=cmd_eval_tasks)

    p = sub.add_parser("heads", help="layer x head scores and top-20 heads")
    _common(p)
    _dataset(p, "paired/1 JSON lines")
    p.add_argument("--method", choices=("logit", "causal", "both"), default="both")
    p.add_argument("--genders", type=_genders, default=ds.DEFAULT_GENDERS)
    p.set_defaults(func=cmd_heads)

    p = sub.add_parser("neurons", help="value and query neurons for a prompt or a paired/1 corpus")
    _common(p)
    _dataset(p, "paired/1 JSON lines (corpus mode)")
    p.add_argument("--prompt")
    p.add_argument("--target", help="single-token target string, e.g. ' man'")
    p.add_argument("-n", type=int, default=10, help="neurons per list")
    p.add_argument("--n-top", type=int, default=10, help="projection tokens per neuron")
    p.add_argument("--genders", type=_genders, default=ds.DEFAULT_GENDERS)
    p.set_defaults(func=cmd_neurons)

    p = sub.add_parser("ine", help="select neurons to mask (writes plan.json, version 1)")
    _common(p)
    _dataset(p, "paired/1 CommonWords JSON lines")
    p.add_argument("--probe", help="task/1 capability probe")
    p.add_argument("--n-per-role", type=int, default=50)
    p.add_argument("--budget", type=int, default=50)
    p.add_argument("--threshold", type=float, default=1.0, help="largest allowed capability drop, in points")
    p.add_argument("--bias-sample", type=int, default=200)
    p.add_argument("--genders", type=_genders, default=ds.DEFAULT_GENDERS)
    p.set_defaults(func=cmd_ine)

    p = sub.add_parser("apply", help="mask a plan's neurons and write the edited model")
    _common(p, tokenizer=False)
    p.add_argument("--plan")
    p.add_argument("--ignore-hash", action="store_true", help="apply even if the plan was built for another model")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("cna", help="watched-neuron coefficients before and after masking")
    _common(p)
    p.add_argument("--plan", help="mask the neurons of this plan")
    p.add_argument("--mask", help="comma-separated neuron ids, e.g. ffn:L0:N3,attn:L1H0:N2")
    p.add_argument("--watch", help="comma-separated neuron ids")
    p.add_argument("--prompt")
    p.add_argument("--n-top", type=int, default=10)
    p.set_defaults(func=cmd_cna)

    p = sub.add_parser("make-desk", help="write a small synthetic model, tokenizer and datasets")
    _common(p, model=False, tokenizer=False)
    p.add_argument("--kind", choices=("planted-bias", "symmetric", "chain"), default="planted-bias")
    p.set_defaults(func=cmd_make_desk)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    elif args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        run = Run(args)
    except OSError as e:
        print(f"error: cannot create output directory: {e}", file=sys.stderr)
        return EXIT_INPUT
    code = EXIT_OK
    try:
        args.func(run)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    if code != EXIT_OK:
        run.status = "input-error" if code == EXIT_INPUT else "failed"
    run.manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
