"""Command-line front end for the experiments and the path inspector."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .eval import (
    E2E_TCP,
    INDIRECTION_MODES,
    NATIVE,
    PROXY,
    SETUP_MODES,
    ScenarioConfig,
    flowsetup_csv,
    indirection_csv,
    run_flow_setup,
    run_indirection,
    run_multicast_gain,
)
from .pathcore import combine
from .resolver import LOCALIZED, NON_LOCALIZED, PRECOMPUTED
from .topology import PathCache, TopologyError, load_topology

log = logging.getLogger("nbr_edge")

SEED_ENV = "NBR_EDGE_SEED"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        items = [x for x in raw.replace(" ", ",").split(",") if x]
        if not items:
            raise ValueError(f"{name}: empty list")
        return tuple(elem(x) for x in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


_FIELDS = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
_DEFAULTS = ScenarioConfig()


def coerce_field(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown setting {name!r}")
    try:
        return _coerce(name, raw, getattr(_DEFAULTS, name))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; '#' starts a comment; lists are comma separated."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = coerce_field(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def build_config(args) -> ScenarioConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config(text, str(path)))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = coerce_field(k.strip(), v)
    for flag in ("seed", "replications", "tau", "alpha", "users", "jitter", "topology", "workers"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = v
    if getattr(args, "wireless", False):
        values["wireless"] = True
    if getattr(args, "samples", None) is not None:
        key = "indirection_samples" if args.command == "indirection" else "samples"
        values[key] = args.samples
    try:
        config = ScenarioConfig(**values)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return config


# -- outputs ------------------------------------------------------------------


def _write(out_dir: Path, name: str, text: str) -> dict:
    (out_dir / name).write_text(text)
    return {"path": name, "sha256": hashlib.sha256(text.encode()).hexdigest()}


def write_manifest(out_dir: Path, command: str, config: ScenarioConfig, outputs: list[dict],
                   seeds: list, started: float) -> None:
    """Deterministic manifest plus a separate timing file.

    Wall-clock time lives in ``timing.json`` so that identical runs keep
    byte-identical manifests.
    """
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_digest": config.digest(),
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(config).items()},
        "seeds": seeds,
        "outputs": outputs,
        "timing": "timing.json",
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    timing = {"command": command, "wall_clock_s": round(time.perf_counter() - started, 3)}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise InvariantViolation(msg)


# -- commands -----------------------------------------------------------------


def cmd_gain(args, config: ScenarioConfig, out_dir: Path) -> None:
    started = time.perf_counter()
    report = run_multicast_gain(config)
    for users, tau, alpha, rep, uni, multi, g in report.details:
        _check(multi <= uni, f"multicast exceeds unicast at U={users} tau={tau} alpha={alpha} rep={rep}")
        if tau == 0:
            _check(g == 1.0, f"gain {g} != 1 with tau=0 at U={users} alpha={alpha} rep={rep}")
    outputs = [_write(out_dir, "gain.csv", report.to_csv()),
               _write(out_dir, "gain_detail.csv", report.detail_csv())]
    write_manifest(out_dir, "gain", config, outputs,
                   [[config.seed, r] for r in range(config.replications)], started)
    for p in report.points:
        print(f"U={p.users} tau={p.tau} alpha={p.alpha} gain={p.gain:.4f} "
              f"ci=[{p.ci_low:.4f}, {p.ci_high:.4f}]")


def cmd_flowsetup(args, config: ScenarioConfig, out_dir: Path) -> None:
    started = time.perf_counter()
    modes = SETUP_MODES if args.mode == "all" else (args.mode,)
    topo = config.load_topology()
    samples = {m: run_flow_setup(config, m, topology=topo) for m in modes}
    for m, vals in samples.items():
        _check(all(v >= 0 for v in vals), f"negative setup time in mode {m}")
    delays_positive = min(config.access_delay_ms, config.core_delay_ms,
                          config.wireless_access_delay_ms if config.wireless else config.access_delay_ms) > 0
    if delays_positive and len(modes) == 3:
        for i, (n, p, e) in enumerate(zip(samples[NATIVE], samples[PROXY], samples[E2E_TCP])):
            _check(n < p < e, f"sample {i}: expected native < proxy < e2e_tcp, got {n}, {p}, {e}")
    outputs = [_write(out_dir, "flowsetup.csv", flowsetup_csv(samples))]
    write_manifest(out_dir, "flowsetup", config, outputs, [config.seed], started)
    for m, vals in samples.items():
        print(f"{m}: n={len(vals)} mean={sum(vals) / len(vals):.3f} ms")


def cmd_indirection(args, config: ScenarioConfig, out_dir: Path) -> None:
    started = time.perf_counter()
    modes = INDIRECTION_MODES if args.mode == "all" else (args.mode,)
    topo = config.load_topology()
    samples = {m: run_indirection(config, m, topology=topo) for m in modes}
    j = config.jitter
    lo = config.nr_rtt_ms * (1 - j) + config.nr_processing_ms - 1e-9
    hi = config.nr_rtt_ms * (1 + j) + config.nr_processing_ms + 1e-9
    for m, vals in samples.items():
        for s in vals:
            _check(lo <= s.initial_ms <= hi, f"{m}: initial lookup {s.initial_ms} outside [{lo}, {hi}]")
            if m == PRECOMPUTED:
                _check(s.indirection_ms == 0.0, f"precomputed indirection {s.indirection_ms} != 0")
            elif m == LOCALIZED:
                _check(abs(s.indirection_ms - config.local_compute_ms) < 1e-9,
                       f"localized indirection {s.indirection_ms} != {config.local_compute_ms}")
            elif m == NON_LOCALIZED:
                _check(lo <= s.indirection_ms <= hi, f"non-localized indirection {s.indirection_ms} outside [{lo}, {hi}]")
    outputs = [_write(out_dir, "indirection.csv", indirection_csv(samples))]
    write_manifest(out_dir, "indirection", config, outputs, [config.seed], started)
    for m, vals in samples.items():
        print(f"{m}: initial={sum(s.initial_ms for s in vals) / len(vals):.3f} ms "
              f"indirection={sum(s.indirection_ms for s in vals) / len(vals):.3f} ms")


def format_trace(topology_source: str, src: str, dsts: list[str]) -> str:
    topo = load_topology(topology_source)
    paths = PathCache(topo)
    src = topo.resolve(src)
    lines = [f"topology {topo.name or topology_source}: {len(topo.nodes)} nodes, {len(topo.links)} links"]
    compiled = []
    for d in dsts:
        p = paths.path(src, topo.resolve(d))
        compiled.append(p)
        bits = p.path_id.positions()
        lines.append(f"{src} -> {p.dst}: nodes {' '.join(p.nodes)}")
        lines.append(f"  bits {bits if bits else '[]'} ({len(bits)} links)")
        lines.append(f"  pathid {p.path_id.to_bytes().hex()}")
    if len(compiled) > 1:
        tree = combine(p.path_id for p in compiled)
        edges = paths.tree_edges(tree)
        lines.append(f"combined pathid {tree.to_bytes().hex()}")
        lines.append(f"  bits {tree.positions()}")
        lines.append(f"  tree edges ({len(edges)}): " + " ".join(f"{a}-{b}" for a, b in edges))
        lines.append(f"  sum of path lengths {sum(p.hops for p in compiled)}")
    return "\n".join(lines)


def cmd_trace(args) -> None:
    print(format_trace(args.topology or "attmpls", args.src, args.dst))


# -- argument parsing -----------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int, help=f"base seed (fallback: ${SEED_ENV})")
    p.add_argument("--replications", type=int)
    p.add_argument("--out-dir", default="out", help="directory for CSVs and the manifest")
    p.add_argument("--jitter", type=float, help="uniform link jitter fraction")
    p.add_argument("--topology", help="builtin name, GraphML file or edge list")
    p.add_argument("--samples", type=int, help="sample count")
    p.add_argument("--workers", type=int, help="worker processes for replications")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbr-edge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gain", help="multicast gain over the (users, tau, alpha) grid")
    _common(g)
    g.add_argument("--tau", type=_floats, help="catchment intervals in s, comma separated")
    g.add_argument("--alpha", type=_floats, help="Zipf exponents, comma separated")
    g.add_argument("--users", type=_ints, help="users per proxy, comma separated")

    f = sub.add_parser("flowsetup", help="flow setup time samples")
    _common(f)
    f.add_argument("--mode", choices=(*SETUP_MODES, "all"), default="all")
    f.add_argument("--wireless", action="store_true", help="wireless client access link")

    i = sub.add_parser("indirection", help="initial discovery and indirection latency")
    _common(i)
    i.add_argument("--mode", choices=(*INDIRECTION_MODES, "all"), default="all")

    t = sub.add_parser("trace", help="show paths, PathIds and the combined tree")
    t.add_argument("--topology", help="builtin name, GraphML file or edge list")
    t.add_argument("src")
    t.add_argument("dst", nargs="+")
    return parser


COMMANDS = {"gain": cmd_gain, "flowsetup": cmd_flowsetup, "indirection": cmd_indirection}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "trace":
            cmd_trace(args)
            return 0
        config = build_config(args)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, config, out_dir)
    except ConfigError as exc:
        print(f"nbr-edge: config error: {exc}", file=sys.stderr)
        return 2
    except TopologyError as exc:
        print(f"nbr-edge: topology error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"nbr-edge: invariant violated: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
