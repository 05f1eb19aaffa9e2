"""Command-line front end: deterministic experiment tables and fixtures.

Subcommands
-----------
golden     write a fixture of golden decoder-block outputs
verify     run the oracle-equivalence self-check suites
cost       decode TPOT table across fusion variants
ablate     four-configuration fusion ablation at one decode length
flops      prefill/decode FLOPs table
calibrate  fit hardware-model parameters to a measurements CSV
fidelity   half-precision fidelity metrics on a decode instance
trace      JSONL execution trace of one simulated fused step

Configuration is a flat, typed key=value file with dotted sections
(model.*, hardware.*, plan.*, run.*); unknown keys are errors.  Flags
override config values.  Exit codes: 0 success, 1 verification/model
failure, 2 usage or configuration error.

All commands are deterministic given (config, seed): repeated runs emit
byte-identical files.  Table files round-trip through ``parse_table``.
"""

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import ClusterSpec, fused_block_step, trace_to_jsonl
from .config import ModelConfig, PRESETS, preset
from .fidelity import (
    ADVERSARIAL_N_BLOCKS,
    adversarial_instance,
    seed_sweep,
    synthetic_instance,
)
from .golden import decoder_block_golden
from .halfnum import Precision
from .perfmodel import (
    DEFAULT_BANDWIDTH,
    DEFAULT_ELEM_SIZE,
    DEFAULT_PROMPT_LEN,
    CalibrationError,
    HardwareModel,
    ablate,
    bundled_measurements,
    calibrate,
    flops,
    read_measurements_csv,
    shipped_calibration,
    tpot_for_decode,
)
from .plans import KERNEL_CLASSES, NAMED_PLANS, plan_baseline, plan_full_fused
from .verify import run_suites
from .weights import KVCache, load_weights, synth_weights

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

DEFAULT_SEQ_LENS = (16, 32, 64, 128, 256, 512, 1024, 2048)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Flat dotted-key config files.

_MODEL_DIM_KEYS = (
    "model.hidden", "model.n_heads", "model.d_head", "model.n_layers",
    "model.d_mlp", "model.rotary_pct", "model.vocab",
)

CONFIG_SCHEMA = {
    "model.preset": "str",
    "model.hidden": "int",
    "model.n_heads": "int",
    "model.d_head": "int",
    "model.n_layers": "int",
    "model.d_mlp": "int",
    "model.rotary_pct": "float",
    "model.vocab": "int",
    "model.ln_eps": "float",
    "model.theta_base": "float",
    "model.parallel_residual": "bool",
    "hardware.bandwidth": "float",
    "hardware.launch_overhead": "float",
    "hardware.descriptor_cost": "float",
    "hardware.graph_replay_overhead": "float",
    **{f"hardware.efficiency.{c}": "float" for c in KERNEL_CLASSES},
    "plan.name": "str",
    "plan.graph_mode": "bool",
    "run.seq_lens": "int_list",
    "run.seeds": "int_list",
    "run.seed": "int",
    "run.format": "str",
    "run.out": "str",
    "run.measurements": "str",
    "run.prompt_len": "int",
    "run.decode_tokens": "int",
    "run.n_blocks": "int",
    "run.steps": "int",
    "run.n_seeds": "int",
    "run.suites": "str_list",
    "run.inject_fault": "bool",
    "run.weights_manifest": "str",
    "run.weights_blob": "str",
    "run.gelu": "str",
    "run.adversarial": "bool",
    "run.elem_size": "int",
}


def _parse_value(key: str, raw: str, kind: str):
    try:
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            if len(raw) >= 2 and raw[0] == raw[-1] == '"':
                return raw[1:-1]
            return raw
        if kind == "int_list":
            return [int(part.strip()) for part in raw.split(",") if part.strip()]
        if kind == "str_list":
            return [part.strip() for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"config key {key}: bad {kind} value {raw!r} ({e})") from None
    raise ConfigError(f"internal: unknown schema kind {kind!r}")


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` lines are comments; typed by schema."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, CONFIG_SCHEMA[key])
    return values


def read_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def build_model_config(values: dict, default_preset: str) -> ModelConfig:
    name = values.get("model.preset")
    dims = {k: values[k] for k in _MODEL_DIM_KEYS if k in values}
    extras = {
        k.split(".", 1)[1]: values[k]
        for k in ("model.ln_eps", "model.theta_base", "model.parallel_residual")
        if k in values
    }
    if name is None and len(dims) == len(_MODEL_DIM_KEYS):
        cfg = ModelConfig(**{k.split(".", 1)[1]: v for k, v in dims.items()}, **extras)
        return cfg
    if name is None and dims:
        missing = sorted(set(_MODEL_DIM_KEYS) - set(dims))
        raise ConfigError(
            "explicit model dimensions are incomplete without model.preset; "
            f"missing {missing}"
        )
    try:
        cfg = preset(name or default_preset)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    overrides = {k.split(".", 1)[1]: v for k, v in dims.items()}
    overrides.update(extras)
    if overrides:
        cfg = cfg.with_(**overrides)
    return cfg


def build_hardware(values: dict):
    """Explicit HardwareModel when any hardware.* key is set, else None."""
    hw_keys = [k for k in values if k.startswith("hardware.")]
    if not hw_keys:
        return None
    efficiency = {c: 1.0 for c in KERNEL_CLASSES}
    for c in KERNEL_CLASSES:
        k = f"hardware.efficiency.{c}"
        if k in values:
            efficiency[c] = values[k]
    try:
        return HardwareModel(
            bandwidth=values.get("hardware.bandwidth", DEFAULT_BANDWIDTH),
            launch_overhead=values.get("hardware.launch_overhead", 0.0),
            descriptor_cost=values.get("hardware.descriptor_cost", 0.0),
            graph_replay_overhead=values.get("hardware.graph_replay_overhead", 0.0),
            efficiency=efficiency,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# Tables: uniform emit/parse for CSV and JSON.

@dataclass
class Table:
    columns: tuple
    rows: list  # tuples of int | float | str

    def __post_init__(self):
        self.columns = tuple(self.columns)
        self.rows = [tuple(r) for r in self.rows]
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValueError("row width does not match columns")


def _cell_to_str(cell) -> str:
    if isinstance(cell, bool):
        raise TypeError("boolean table cells are not supported")
    if isinstance(cell, int):
        return str(cell)
    if isinstance(cell, float):
        return repr(cell)
    return str(cell)


def _str_to_cell(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def emit_table(table: Table, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_cell_to_str(c) for c in row])
        return buf.getvalue()
    if fmt == "json":
        doc = {"columns": list(table.columns), "rows": [list(r) for r in table.rows]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def parse_table(text: str, fmt: str) -> Table:
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        try:
            columns = tuple(next(reader))
        except StopIteration:
            raise ValueError("empty table") from None
        rows = [tuple(_str_to_cell(c) for c in row) for row in reader if row]
        return Table(columns, rows)
    if fmt == "json":
        doc = json.loads(text)
        return Table(tuple(doc["columns"]), [tuple(r) for r in doc["rows"]])
    raise ValueError(f"unknown table format {fmt!r}")


def _write_output(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Shared option resolution.

def _resolve(ns) -> dict:
    values = read_config(ns.config) if ns.config else {}
    if getattr(ns, "preset", None):
        values["model.preset"] = ns.preset
    if getattr(ns, "seed", None) is not None:
        values["run.seed"] = ns.seed
    if getattr(ns, "seq_lens", None):
        values["run.seq_lens"] = _parse_value(
            "run.seq_lens", ns.seq_lens, "int_list")
    if getattr(ns, "out", None):
        values["run.out"] = ns.out
    if getattr(ns, "format", None):
        values["run.format"] = ns.format
    return values


def _seq_lens(values) -> list:
    lens = values.get("run.seq_lens", list(DEFAULT_SEQ_LENS))
    if not lens:
        raise ConfigError("run.seq_lens must be non-empty")
    if any(n < 1 for n in lens):
        raise ConfigError("run.seq_lens entries must be >= 1")
    return lens


def _format(values) -> str:
    fmt = values.get("run.format", "csv")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"run.format must be csv or json, got {fmt!r}")
    return fmt


def _hardware_or_shipped(values) -> HardwareModel:
    hw = build_hardware(values)
    return hw if hw is not None else shipped_calibration().hardware


def _gelu(values) -> str:
    g = values.get("run.gelu", "tanh")
    if g not in ("tanh", "exact"):
        raise ConfigError(f"run.gelu must be tanh or exact, got {g!r}")
    return g


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_golden(ns) -> int:
    values = _resolve(ns)
    cfg = build_model_config(values, default_preset="tiny")
    seed = values.get("run.seed", 0)
    steps = ns.steps if ns.steps is not None else values.get("run.steps", 8)
    if steps < 1:
        raise ConfigError("run.steps must be >= 1")
    gelu = _gelu(values)

    manifest = values.get("run.weights_manifest")
    blob = values.get("run.weights_blob")
    if manifest and blob:
        if Path(manifest).exists() and Path(blob).exists():
            weights = load_weights(manifest, blob)
            weights.validate(cfg)
            source = str(manifest)
        else:
            missing = manifest if not Path(manifest).exists() else blob
            print(
                f"notice: weight file {missing} not found; "
                f"falling back to seeded synthesis (seed={seed})",
                file=sys.stderr,
            )
            weights = synth_weights(cfg, seed)
            source = f"synthesized(seed={seed})"
    else:
        weights = synth_weights(cfg, seed)
        source = f"synthesized(seed={seed})"

    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((steps, cfg.hidden)) * 0.5
    cache = KVCache(cfg.n_heads, cfg.d_head)
    outputs = []
    for t in range(steps):
        outputs.append(decoder_block_golden(xs[t], weights, cache, t, cfg, gelu))

    fixture = {
        "model": {
            "hidden": cfg.hidden, "n_heads": cfg.n_heads, "d_head": cfg.d_head,
            "n_layers": cfg.n_layers, "d_mlp": cfg.d_mlp,
            "rotary_pct": cfg.rotary_pct, "vocab": cfg.vocab,
            "ln_eps": cfg.ln_eps, "theta_base": cfg.theta_base,
            "parallel_residual": cfg.parallel_residual,
        },
        "weights_source": source,
        "seed": seed,
        "gelu": gelu,
        "inputs": xs.tolist(),
        "outputs": [o.tolist() for o in outputs],
        "cache_keys": cache.keys().tolist(),
        "cache_values": cache.values().tolist(),
    }
    _write_output(json.dumps(fixture, indent=2, sort_keys=True) + "\n",
                  values.get("run.out"))
    return EXIT_OK


def cmd_verify(ns) -> int:
    values = _resolve(ns)
    suites = None
    if ns.suites is not None:
        suites = [s.strip() for s in ns.suites.split(",") if s.strip()]
    elif "run.suites" in values:
        suites = values["run.suites"]
    seed = values.get("run.seed", 0)
    inject = ns.inject_fault or values.get("run.inject_fault", False)
    try:
        results = run_suites(suites, seed=seed, inject_fault=inject)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        detail = f"  ({r.detail})" if r.detail else ""
        print(f"{mark} [{r.suite}] {r.name}{detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_cost(ns) -> int:
    values = _resolve(ns)
    cfg = build_model_config(values, default_preset="pythia-2.8b")
    hw = _hardware_or_shipped(values)
    prompt_len = values.get("run.prompt_len", DEFAULT_PROMPT_LEN)
    elem = values.get("run.elem_size", DEFAULT_ELEM_SIZE)
    rows = []
    for T in _seq_lens(values):
        base = tpot_for_decode(plan_baseline(), cfg, hw, T, prompt_len, elem)
        fused = tpot_for_decode(
            plan_full_fused(graph_mode=False), cfg, hw, T, prompt_len, elem)
        graph = tpot_for_decode(
            plan_full_fused(graph_mode=True), cfg, hw, T, prompt_len, elem)
        rows.append((
            T,
            base.tpot_seconds * 1e3,
            fused.tpot_seconds * 1e3,
            graph.tpot_seconds * 1e3,
            base.tpot_seconds / fused.tpot_seconds,
            base.tpot_seconds / graph.tpot_seconds,
        ))
    table = Table(
        ("decode_tokens", "baseline_ms", "fused_ms", "fused_graph_ms",
         "fused_speedup", "fused_graph_speedup"),
        rows,
    )
    _write_output(emit_table(table, _format(values)), values.get("run.out"))
    return EXIT_OK


def cmd_ablate(ns) -> int:
    values = _resolve(ns)
    cfg = build_model_config(values, default_preset="pythia-2.8b")
    hw = _hardware_or_shipped(values)
    decode_tokens = (
        ns.decode_tokens if ns.decode_tokens is not None
        else values.get("run.decode_tokens", 2048)
    )
    prompt_len = values.get("run.prompt_len", DEFAULT_PROMPT_LEN)
    elem = values.get("run.elem_size", DEFAULT_ELEM_SIZE)
    try:
        report = ablate(cfg, hw, decode_tokens, prompt_len, elem)
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    table = Table(
        ("configuration", "tpot_ms", "speedup_vs_baseline"),
        [(r.configuration, r.tpot_ms, r.speedup_vs_baseline) for r in report.rows],
    )
    _write_output(emit_table(table, _format(values)), values.get("run.out"))
    return EXIT_OK


def cmd_flops(ns) -> int:
    values = _resolve(ns)
    cfg = build_model_config(values, default_preset="pythia-2.8b")
    prompt_len = (
        ns.prompt_len if ns.prompt_len is not None
        else values.get("run.prompt_len", DEFAULT_PROMPT_LEN)
    )
    rows = []
    for T in _seq_lens(values):
        r = flops(cfg, prompt_len, T)
        rows.append((
            T,
            r.prefill_flops / 1e9,
            r.decode_flops / 1e9,
            r.total_flops / 1e9,
        ))
    table = Table(
        ("decode_tokens", "prefill_gflops", "decode_gflops", "total_gflops"),
        rows,
    )
    _write_output(emit_table(table, _format(values)), values.get("run.out"))
    return EXIT_OK


def cmd_calibrate(ns) -> int:
    values = _resolve(ns)
    cfg = build_model_config(values, default_preset="pythia-2.8b")
    path = ns.measurements or values.get("run.measurements")
    try:
        measurements = read_measurements_csv(path) if path else bundled_measurements()
    except (OSError, ValueError) as e:
        print(f"error: measurements: {e}", file=sys.stderr)
        return EXIT_USAGE
    bandwidth = values.get("hardware.bandwidth", DEFAULT_BANDWIDTH)
    prompt_len = values.get("run.prompt_len", DEFAULT_PROMPT_LEN)
    elem = values.get("run.elem_size", DEFAULT_ELEM_SIZE)
    try:
        result = calibrate(measurements, cfg, bandwidth, prompt_len, elem)
    except CalibrationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    table = Table(
        ("variant", "seq_len", "measured_ms", "predicted_ms", "rel_error"),
        [
            (r.variant, r.seq_len, r.measured_ms, r.predicted_ms, r.rel_error)
            for r in result.rows
        ],
    )
    out = values.get("run.out")
    _write_output(emit_table(table, _format(values)), out)
    params = sys.stdout if out else sys.stderr
    hw = result.hardware
    print(f"bandwidth: {hw.bandwidth:.6g} B/s", file=params)
    for c in KERNEL_CLASSES:
        print(f"efficiency[{c}]: {hw.efficiency[c]:.6g}", file=params)
    print(f"launch_overhead: {hw.launch_overhead:.6g} s", file=params)
    print(f"descriptor_cost: {hw.descriptor_cost:.6g} s", file=params)
    print(f"graph_replay_overhead: {hw.graph_replay_overhead:.6g} s", file=params)
    print(f"max_rel_error: {result.max_rel_error:.6g}", file=params)
    return EXIT_OK


def cmd_fidelity(ns) -> int:
    values = _resolve(ns)
    seed = values.get("run.seed", 0)
    n_seeds = ns.n_seeds if ns.n_seeds is not None else values.get("run.n_seeds", 100)
    if n_seeds < 1:
        raise ConfigError("run.n_seeds must be >= 1")
    adversarial = ns.adversarial or values.get("run.adversarial", False)
    if adversarial:
        instance = adversarial_instance()
        n_blocks = values.get("run.n_blocks", ADVERSARIAL_N_BLOCKS)
    else:
        cfg = build_model_config(values, default_preset="tiny")
        instance = synthetic_instance(seed, cfg)
        n_blocks = values.get("run.n_blocks", 4)
    sweep = seed_sweep(
        instance, range(n_seeds), n_blocks=n_blocks,
        precision=Precision.FP16, gelu=_gelu(values),
    )
    summary = sweep.summary()
    rows = []
    for metric in ("token_match_rate", "logits_mae",
                   "top5_agreement", "top10_agreement"):
        m = summary[metric]
        rows.append((metric, m["min"], m["mean"], m["max"]))
    rows.append(("trials_per_seed", instance.steps, instance.steps, instance.steps))
    rows.append(("seeds", n_seeds, n_seeds, n_seeds))
    table = Table(("metric", "min", "mean", "max"), rows)
    _write_output(emit_table(table, _format(values)), values.get("run.out"))
    return EXIT_OK


def cmd_trace(ns) -> int:
    values = _resolve(ns)
    cfg = build_model_config(values, default_preset="tiny")
    seed = values.get("run.seed", 0)
    plan_name = ns.plan or values.get("plan.name", "full-fused")
    if plan_name not in NAMED_PLANS:
        raise ConfigError(
            f"unknown plan {plan_name!r} (known: {', '.join(NAMED_PLANS)})")
    plan = NAMED_PLANS[plan_name]()
    if "plan.graph_mode" in values:
        plan = plan.with_graph_mode(values["plan.graph_mode"])
    n_blocks = ns.n_blocks if ns.n_blocks is not None else values.get("run.n_blocks", 4)
    prompt_len = values.get("run.prompt_len", 12)
    elem = values.get("run.elem_size", DEFAULT_ELEM_SIZE)

    weights = synth_weights(cfg, seed)
    rng = np.random.default_rng(seed)
    cache = KVCache.from_arrays(
        rng.standard_normal((cfg.n_heads, prompt_len, cfg.d_head)) * 0.5,
        rng.standard_normal((cfg.n_heads, prompt_len, cfg.d_head)) * 0.5,
    )
    x = rng.standard_normal(cfg.hidden) * 0.5
    spec = ClusterSpec(n_blocks=n_blocks)
    _, trace = fused_block_step(
        x, weights, cache, prompt_len, cfg, spec, plan,
        gelu=_gelu(values), elem_size=elem,
    )
    _write_output(trace_to_jsonl(trace), values.get("run.out"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser.

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neoxfuse",
        description="Fused-decoder simulator and analytic cost model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--preset", help=f"model preset ({', '.join(PRESETS)})")
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"),
                       help="table format (default: csv)")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--seq-lens",
                       help="comma-separated decode-token counts")

    p = sub.add_parser("golden", help="golden decoder-block fixture")
    common(p)
    p.add_argument("--steps", type=int, help="decode steps to record")
    p.set_defaults(func=cmd_golden)

    p = sub.add_parser("verify", help="oracle-equivalence self checks")
    common(p)
    p.add_argument("--suites", help="comma-separated suite names")
    p.add_argument("--inject-fault", action="store_true",
                   help="test hook: perturb one comparison to force a failure")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cost", help="decode TPOT table")
    common(p)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("ablate", help="fusion-configuration ablation")
    common(p)
    p.add_argument("--decode-tokens", type=int, help="decode length (default 2048)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("flops", help="FLOPs table")
    common(p)
    p.add_argument("--prompt-len", type=int, help="prefill length (default 5)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("calibrate", help="fit hardware model to measurements")
    common(p)
    p.add_argument("--measurements", help="measurements CSV (default: bundled)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fidelity", help="half-precision fidelity metrics")
    common(p)
    p.add_argument("--n-seeds", type=int, help="atomic seeds to sweep (default 100)")
    p.add_argument("--adversarial", action="store_true",
                   help="use the order-sensitive adversarial instance")
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser("trace", help="JSONL trace of one fused step")
    common(p)
    p.add_argument("--plan", help=f"fusion plan ({', '.join(NAMED_PLANS)})")
    p.add_argument("--n-blocks", type=int, help="cluster size (default 4)")
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
