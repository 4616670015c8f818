"""Traffic-rule DSL, geometric compliance checks and multilabel rule targets.

Grammar (keywords are case-sensitive, whitespace is free)::

    expr := term (('and' | 'or') term)*
    term := 'not' term | atom | '(' expr ')'
    atom := 'within_drivable'
          | 'no_cross' '(' kind ',' cond ')'
          | 'yield_at' '(' kind ('|' kind)* ',' radius ')'
          | 'ped_priority'

``and``/``or`` share one precedence level and associate to the left.
"""
from __future__ import annotations

import enum
import hashlib
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import geometry as geo
from .scene import Dataset, Scene, Signal, ZoneKind

DEFAULT_CONFLICT_RADIUS = 15.0


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.message = message
        self.offset = offset


class Kind(str, enum.Enum):
    TRAFFIC_LIGHT = "traffic_light"
    STOP_SIGN = "stop_sign"
    YIELD = "yield"
    CROSSING = "crossing"


class Condition(str, enum.Enum):
    ALWAYS = "always"
    SIGNAL_RED = "signal_red"
    CROSSING_ACTIVE = "crossing_active"
    CONFLICT_PRESENT = "conflict_present"


@dataclass(frozen=True)
class WithinDrivable:
    pass


@dataclass(frozen=True)
class NoCross:
    kind: Kind
    cond: Condition


@dataclass(frozen=True)
class YieldAt:
    kinds: tuple[Kind, ...]
    radius: float


@dataclass(frozen=True)
class PedPriority:
    pass


@dataclass(frozen=True)
class And:
    left: "RuleExpr"
    right: "RuleExpr"


@dataclass(frozen=True)
class Or:
    left: "RuleExpr"
    right: "RuleExpr"


@dataclass(frozen=True)
class Not:
    operand: "RuleExpr"


RuleExpr = Union[WithinDrivable, NoCross, YieldAt, PedPriority, And, Or, Not]


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\s*(?:(?P<num>[0-9]+(?:\.[0-9]*)?(?:[eE][+-]?[0-9]+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<punct>[(),|-]))")


def _tokenize(text: str):
    pos = 0
    out = []
    while True:
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            rest = text[pos:]
            if rest.strip() == "":
                break
            start = pos + len(rest) - len(rest.lstrip())
            raise RuleSyntaxError(f"unexpected character {text[start]!r}", start + 1)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    out.append(("eof", "", len(text) + 1))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, off = self.take()
        if val != value or kind == "eof":
            found = "end of input" if kind == "eof" else repr(val)
            raise RuleSyntaxError(f"expected {value!r}, found {found}", off)

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("and", "or") and self.peek()[0] == "name":
            op = self.take()[1]
            rhs = self.term()
            node = And(node, rhs) if op == "and" else Or(node, rhs)
        return node

    def term(self):
        kind, val, off = self.peek()
        if kind == "name" and val == "not":
            self.take()
            return Not(self.term())
        if kind == "punct" and val == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        return self.atom()

    def _kind(self):
        kind, val, off = self.take()
        try:
            return Kind(val), off
        except ValueError:
            found = "end of input" if kind == "eof" else repr(val)
            raise RuleSyntaxError(f"unknown zone kind {found}", off) from None

    def atom(self):
        kind, val, off = self.take()
        if kind == "eof":
            raise RuleSyntaxError("expected a rule atom, found end of input", off)
        if kind != "name":
            raise RuleSyntaxError(f"expected a rule atom, found {val!r}", off)
        if val == "within_drivable":
            return WithinDrivable()
        if val == "ped_priority":
            return PedPriority()
        if val == "no_cross":
            self.expect("(")
            zone, zoff = self._kind()
            self.expect(",")
            ck, cval, coff = self.take()
            try:
                cond = Condition(cval)
            except ValueError:
                raise RuleSyntaxError(f"unknown condition {cval!r}", coff) from None
            self.expect(")")
            if cond == Condition.SIGNAL_RED and zone != Kind.TRAFFIC_LIGHT:
                raise RuleSyntaxError("signal_red applies to traffic_light zones only", coff)
            if cond == Condition.CROSSING_ACTIVE and zone != Kind.CROSSING:
                raise RuleSyntaxError("crossing_active applies to crossing zones only", coff)
            return NoCross(zone, cond)
        if val == "yield_at":
            self.expect("(")
            kinds = [self._kind()[0]]
            while self.peek()[1] == "|":
                self.take()
                kinds.append(self._kind()[0])
            self.expect(",")
            nk, nval, noff = self.take()
            negative = False
            if nval == "-":
                negative = True
                nk, nval, noff = self.take()
            if nk != "num":
                raise RuleSyntaxError(f"expected a radius, found {nval!r}", noff)
            radius = -float(nval) if negative else float(nval)
            if not radius > 0:
                raise RuleSyntaxError("radius must be positive", noff)
            self.expect(")")
            return YieldAt(tuple(kinds), radius)
        raise RuleSyntaxError(f"unknown atom {val!r}", off)


def parse_rule(text: str) -> RuleExpr:
    """Parse a rule expression; errors carry a 1-based character offset."""
    p = _Parser(text)
    node = p.expr()
    kind, val, off = p.peek()
    if kind != "eof":
        raise RuleSyntaxError(f"unexpected {val!r}", off)
    return node


def to_text(expr: RuleExpr) -> str:
    """Render an expression so that ``parse_rule(to_text(e)) == e``."""

    def wrap(e):
        return f"({to_text(e)})" if isinstance(e, (And, Or)) else to_text(e)

    if isinstance(expr, WithinDrivable):
        return "within_drivable"
    if isinstance(expr, PedPriority):
        return "ped_priority"
    if isinstance(expr, NoCross):
        return f"no_cross({expr.kind.value}, {expr.cond.value})"
    if isinstance(expr, YieldAt):
        return f"yield_at({'|'.join(k.value for k in expr.kinds)}, {expr.radius!r})"
    if isinstance(expr, Not):
        return f"not {wrap(expr.operand)}"
    if isinstance(expr, (And, Or)):
        op = "and" if isinstance(expr, And) else "or"
        return f"{to_text(expr.left)} {op} {wrap(expr.right)}"
    raise TypeError(f"not a rule expression: {expr!r}")


@dataclass(frozen=True)
class NamedRule:
    name: str
    expr: RuleExpr


def parse_rule_file(text: str) -> list[NamedRule]:
    """Parse ``name: expr`` lines; ``#`` starts a comment."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, body = line.partition(":")
        if not sep or not name.strip():
            raise RuleSyntaxError(f"line {lineno}: expected 'name: expr'", 1)
        try:
            rules.append(NamedRule(name.strip(), parse_rule(body)))
        except RuleSyntaxError as exc:
            raise RuleSyntaxError(f"line {lineno}: {exc.message}", exc.offset) from None
    return rules


def load_rules(path) -> list[NamedRule]:
    return parse_rule_file(Path(path).read_text(encoding="utf-8"))


DEFAULT_RULES_TEXT = """\
# globally applicable
within-drivable: within_drivable
# situational, stop related
stop-red: no_cross(traffic_light, signal_red)
right-of-way: yield_at(stop_sign|yield, 15.0)
ped-priority: ped_priority
"""

RULE_SETS = {
    "all": ("within-drivable", "stop-red", "right-of-way", "ped-priority"),
    "drivability": ("within-drivable",),
    "stop": ("stop-red", "right-of-way", "ped-priority"),
}


def default_rules(names=None) -> list[NamedRule]:
    rules = parse_rule_file(DEFAULT_RULES_TEXT)
    if names is None:
        return rules
    by_name = {r.name: r for r in rules}
    return [by_name[n] for n in names]


# ---------------------------------------------------------------------------
# evaluation


def _zone_polys(scene: Scene, kind: Kind) -> list[tuple[np.ndarray, object]]:
    if kind == Kind.CROSSING:
        return [(c.polygon, c) for c in scene.crossings]
    zk = ZoneKind(kind.value)
    return [(z.polygon, z) for z in scene.stop_zones if z.kind == zk]


def _conflict(scene: Scene, poly: np.ndarray, radius: float) -> bool:
    for a in scene.others():
        if geo.point_polygon_distance(a.history.points[-1], poly) <= radius:
            return True
    return False


def _condition_holds(scene, cond: Condition, poly, zone) -> bool:
    if cond == Condition.ALWAYS:
        return True
    if cond == Condition.SIGNAL_RED:
        return getattr(zone, "signal", None) == Signal.RED
    if cond == Condition.CROSSING_ACTIVE:
        return bool(getattr(zone, "active", False))
    return _conflict(scene, poly, DEFAULT_CONFLICT_RADIUS)


def _violates(scene, polys, trajs) -> np.ndarray:
    hit = np.zeros(len(trajs), dtype=bool)
    for poly in polys:
        hit |= geo.polylines_intersect_polygon(trajs, poly)
    return hit


def evaluate_batch(rule: RuleExpr, scene: Scene, trajs_global: np.ndarray) -> np.ndarray:
    """Compliance of each global-frame trajectory in ``trajs_global`` (T, n, 2)."""
    trajs = np.asarray(trajs_global, dtype=np.float64)
    if trajs.ndim == 2:
        trajs = trajs[None]
    if isinstance(rule, WithinDrivable):
        pts = trajs.reshape(-1, 2)
        covered = np.zeros(len(pts), dtype=bool)
        for poly in scene.drivable:
            todo = ~covered
            if not todo.any():
                break
            covered[todo] = geo.points_in_polygon(pts[todo], poly)
        return covered.reshape(trajs.shape[:2]).all(axis=1)
    if isinstance(rule, PedPriority):
        return evaluate_batch(NoCross(Kind.CROSSING, Condition.CROSSING_ACTIVE), scene, trajs)
    if isinstance(rule, NoCross):
        polys = [p for p, z in _zone_polys(scene, rule.kind) if _condition_holds(scene, rule.cond, p, z)]
        return ~_violates(scene, polys, trajs)
    if isinstance(rule, YieldAt):
        polys = [p for k in rule.kinds for p, _ in _zone_polys(scene, k) if _conflict(scene, p, rule.radius)]
        return ~_violates(scene, polys, trajs)
    if isinstance(rule, And):
        return evaluate_batch(rule.left, scene, trajs) & evaluate_batch(rule.right, scene, trajs)
    if isinstance(rule, Or):
        return evaluate_batch(rule.left, scene, trajs) | evaluate_batch(rule.right, scene, trajs)
    if isinstance(rule, Not):
        return ~evaluate_batch(rule.operand, scene, trajs)
    raise TypeError(f"not a rule expression: {rule!r}")


def evaluate(rule: RuleExpr, scene: Scene, anchor_global) -> bool:
    """Whether one global-frame trajectory complies with ``rule`` in ``scene``."""
    pts = getattr(anchor_global, "points", anchor_global)
    return bool(evaluate_batch(rule, scene, np.asarray(pts)[None])[0])


def _expr(rule) -> RuleExpr:
    return rule.expr if isinstance(rule, NamedRule) else rule


def evaluate_all(rules, scene: Scene, traj_global) -> bool:
    return all(evaluate(_expr(r), scene, traj_global) for r in rules)


def trajectory_intersects_polygon(traj, poly) -> bool:
    """Boundary-inclusive intersects test; raises on zero-area polygons."""
    pts = getattr(traj, "points", traj)
    return geo.polyline_intersects_polygon(np.asarray(pts, dtype=np.float64), poly)


# ---------------------------------------------------------------------------
# labelling


class AnchorHashMismatch(ValueError):
    pass


@dataclass(eq=False)
class ComplianceMatrix:
    entries: np.ndarray  # (N, K) bool
    rule_id: str
    anchor_hash: str

    @property
    def shape(self):
        return self.entries.shape

    def __eq__(self, other):
        return (
            isinstance(other, ComplianceMatrix)
            and self.rule_id == other.rule_id
            and self.anchor_hash == other.anchor_hash
            and np.array_equal(self.entries, other.entries)
        )


def _label_rows(args):
    exprs, samples, anchors = args
    rows = []
    for s in samples:
        pose = s.scene.ego_pose
        glob = geo.to_global(anchors, pose.translation, pose.rotation)
        rows.append(np.stack([evaluate_batch(e, s.scene, glob) for e in exprs]))
    return rows


def label_dataset(rules, dataset: Dataset, anchor_set, mode: str = "per-rule", workers: int = 1) -> list[ComplianceMatrix]:
    """Rule-compliance matrices of every (sample, anchor) pair.

    ``mode`` is ``"per-rule"`` (one matrix per rule) or ``"unified"`` (one
    matrix, the conjunction of all rules).
    """
    if dataset.anchor_hash and dataset.anchor_hash != anchor_set.hash:
        raise AnchorHashMismatch(f"dataset is bound to anchors {dataset.anchor_hash}, got {anchor_set.hash}")
    mode = mode.replace("_", "-").lower()
    if mode not in ("per-rule", "unified"):
        raise ValueError(f"unknown labelling mode {mode!r}")
    rules = list(rules)
    names = [r.name if isinstance(r, NamedRule) else to_text(r) for r in rules]
    exprs = [_expr(r) for r in rules]
    anchors = anchor_set.anchors
    samples = list(dataset.samples)
    if workers > 1 and len(samples) > 1:
        chunks = np.array_split(np.arange(len(samples)), workers * 4)
        jobs = [(exprs, [samples[i] for i in c], anchors) for c in chunks if len(c)]
        with ProcessPoolExecutor(workers) as pool:
            rows = [r for part in pool.map(_label_rows, jobs) for r in part]
    else:
        rows = _label_rows((exprs, samples, anchors))
    K = len(anchors)
    cube = np.stack(rows) if rows else np.zeros((0, len(exprs), K), dtype=bool)
    if mode == "unified":
        return [ComplianceMatrix(cube.all(axis=1), "+".join(names), anchor_set.hash)]
    return [ComplianceMatrix(cube[:, j, :].copy(), names[j], anchor_set.hash) for j in range(len(exprs))]


def save_matrix(matrix: ComplianceMatrix, path) -> None:
    N, K = matrix.entries.shape
    header = {"rule_id": matrix.rule_id, "N": N, "K": K, "anchor_hash": matrix.anchor_hash}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode())
        fh.write(np.packbits(matrix.entries.astype(bool), axis=1).tobytes())


def load_matrix(path) -> ComplianceMatrix:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    N, K = header["N"], header["K"]
    width = (K + 7) // 8
    body = np.frombuffer(raw[nl + 1 :], dtype=np.uint8)
    if body.size != N * width:
        raise ValueError(f"{path}: expected {N * width} payload bytes, found {body.size}")
    entries = np.unpackbits(body.reshape(N, width), axis=1, count=K).astype(bool) if N else np.zeros((0, K), dtype=bool)
    return ComplianceMatrix(entries, header["rule_id"], header["anchor_hash"])


def matrix_filename(rule_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]+", "_", rule_id)
    if len(safe) > 80:
        safe = safe[:60] + "-" + hashlib.sha256(rule_id.encode()).hexdigest()[:12]
    return f"{safe}.cm"
