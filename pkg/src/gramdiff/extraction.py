"""Read discrete production rules out of a trained model.

Rule probabilities come from row-wise softmax of the compact rule matrix; each
retained rule's terminal and next non-terminal are the argmax rows of H2 and
H1. The inverse direction (an exact-parameter model built from a rule set) is
provided for oracle tests and round-trip checks.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import grammar as gm

DEFAULT_THRESHOLD = 0.2   # a rule must beat uniform chance at R=5
CONSTRUCT_LOGIT = 10.0    # saturating logit used by model_from_grammar


@dataclass(frozen=True)
class Rule:
    lhs: int
    terminal: int
    rhs: int
    probability: float


@dataclass
class SymbolicGrammar:
    nonterminals: list
    terminals: list
    start: int
    rules: list
    prune_threshold: float = 0.0
    used: list = field(default_factory=list)  # bool per non-terminal

    def rules_for(self, lhs):
        return [r for r in self.rules if r.lhs == lhs]


def default_names(prefix, count):
    if prefix == "nt" and count <= 26:
        return [chr(ord("A") + i) for i in range(count)]
    return [f"{prefix}{i}" for i in range(count)]


def reachable_nonterminals(rules, start):
    """Non-terminals reachable from the start via the retained rule set."""
    seen = {start}
    frontier = [start]
    by_lhs = {}
    for r in rules:
        by_lhs.setdefault(r.lhs, []).append(r)
    while frontier:
        nxt = frontier.pop()
        for r in by_lhs.get(nxt, ()):
            if r.rhs not in seen:
                seen.add(r.rhs)
                frontier.append(r.rhs)
    return seen


def rule_probabilities(model: gm.GrammarModel, tau=1.0) -> np.ndarray:
    """N x R rule selection probabilities, row i = softmax(Wc[i] / tau)."""
    return dc.softmax_rows(model.Wc.data / tau)


def extract(model: gm.GrammarModel, symbol_table=None, threshold=DEFAULT_THRESHOLD,
            tau=1.0) -> SymbolicGrammar:
    """Discrete rule set of the learned model.

    Rules with probability below `threshold` are dropped; slots of one
    non-terminal that decode to the same (terminal, next) pair are merged by
    summing their probabilities; survivors are renormalized per non-terminal.
    Non-terminals unreachable from the start are marked unused.
    """
    if not 0 <= threshold < 1:
        raise dc.ParameterError(f"threshold must be in [0, 1), got {threshold}")
    probs = rule_probabilities(model, tau)
    if model.terminal_squash == "logistic":
        term_rows = dc.sigmoid_values(model.H2.data)
    else:
        term_rows = dc.softmax_rows(model.H2.data)
    next_rows = dc.softmax_rows(model.H1.data)

    rules = []
    for i in range(model.N):
        merged = {}
        for r in range(model.R):
            p = probs[i, r]
            if p < threshold:
                continue
            row = i * model.R + r
            key = (int(np.argmax(term_rows[row])), int(np.argmax(next_rows[row])))
            merged[key] = merged.get(key, 0.0) + p
        total = sum(merged.values())
        for (t, nxt), p in sorted(merged.items()):
            rules.append(Rule(i, t, nxt, p / total))

    start = int(np.argmax(gm.initial_nonterminal(model).data[0]))
    used = reachable_nonterminals(rules, start)
    return SymbolicGrammar(
        nonterminals=default_names("nt", model.N),
        terminals=list(symbol_table) if symbol_table else default_names("t", model.T),
        start=start,
        rules=rules,
        prune_threshold=threshold,
        used=[i in used for i in range(model.N)],
    )


def model_from_grammar(g, R=None, tau=1.0, logit_scale=CONSTRUCT_LOGIT) -> gm.GrammarModel:
    """Exact-parameter model encoding a discrete rule set.

    Rule slot logits are tau*log(p) shifted so the largest sits at
    +logit_scale; empty slots, H1 and H2 use saturating +-logit_scale logits.
    extract() on the result returns the same grammar up to tiny leakage.
    """
    n, t = len(g.nonterminals), len(g.terminals)
    per_lhs = {i: [r for r in g.rules if r.lhs == i] for i in range(n)}
    if R is None:
        R = max(1, max((len(rs) for rs in per_lhs.values()), default=1))
    model = gm.GrammarModel(n, R, t, seed=0)
    wc = np.full((n, R), -logit_scale)
    h1 = np.full((R * n, n), -logit_scale)
    h2 = np.full((R * n, t), -logit_scale)
    for i, rs in per_lhs.items():
        if len(rs) > R:
            raise dc.ParameterError(f"non-terminal {i} has {len(rs)} rules, R={R}")
        if rs:
            logits = tau * np.log([r.probability for r in rs])
            logits += logit_scale - logits.max()
            for slot, (rule, logit) in enumerate(zip(rs, logits)):
                wc[i, slot] = logit
                h1[i * R + slot, rule.rhs] = logit_scale
                h2[i * R + slot, rule.terminal] = logit_scale
    start = np.full((1, n), -logit_scale)
    start[0, g.start] = logit_scale
    model.Wc.data, model.H1.data, model.H2.data = wc, h1, h2
    model.start_logits.data = start
    return model


def render_dot(g: SymbolicGrammar) -> str:
    """Deterministic DOT text: one node per used non-terminal (start doubled),
    one edge per rule labeled 'terminal (prob)'."""
    used = list(g.used) if getattr(g, "used", None) else None
    if used is None:
        reach = reachable_nonterminals(g.rules, g.start)
        used = [i in reach for i in range(len(g.nonterminals))]
    lines = ["digraph grammar {", "  rankdir=LR;"]
    for i, name in enumerate(g.nonterminals):
        if i == g.start or used[i]:
            shape = "doublecircle" if i == g.start else "circle"
            lines.append(f'  "{name}" [shape={shape}];')
    for r in sorted(g.rules, key=lambda r: (r.lhs, r.terminal, r.rhs)):
        if not used[r.lhs]:
            continue
        label = f"{g.terminals[r.terminal]} ({r.probability:.2f})"
        lines.append(f'  "{g.nonterminals[r.lhs]}" -> "{g.nonterminals[r.rhs]}" '
                     f'[label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def grammar_to_json(g: SymbolicGrammar) -> str:
    doc = {
        "nonterminals": list(g.nonterminals),
        "terminals": list(g.terminals),
        "start": g.start,
        "prune_threshold": g.prune_threshold,
        "used": list(g.used),
        "rules": [
            {"lhs": r.lhs, "terminal": r.terminal, "rhs": r.rhs,
             "probability": r.probability}
            for r in g.rules
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def grammar_equivalence(a, b, prob_tol=0.1):
    """Exhaustive search for a bijection of used non-terminals carrying a's
    rules onto b's with equal terminals and probabilities within prob_tol.

    Returns (True, mapping) or (False, witness string naming the first
    mismatch). Only rules whose lhs is reachable from the start take part.
    """
    used_a = sorted(reachable_nonterminals(a.rules, a.start))
    used_b = sorted(reachable_nonterminals(b.rules, b.start))
    if len(used_a) != len(used_b):
        return False, f"used non-terminal counts differ: {len(used_a)} vs {len(used_b)}"
    rules_a = [r for r in a.rules if r.lhs in set(used_a)]
    rules_b = {(r.lhs, r.terminal, r.rhs): r.probability
               for r in b.rules if r.lhs in set(used_b)}
    if len(rules_a) != len(rules_b):
        return False, f"rule counts differ: {len(rules_a)} vs {len(rules_b)}"

    witness = "no bijection over used non-terminals matches the rule sets"
    for perm in itertools.permutations(used_b):
        mapping = dict(zip(used_a, perm))
        for r in rules_a:
            key = (mapping[r.lhs], r.terminal, mapping[r.rhs])
            pb = rules_b.get(key)
            if pb is None or abs(pb - r.probability) > prob_tol:
                witness = (f"rule {r.lhs}->{r.terminal},{r.rhs} (p={r.probability:.3f}) "
                           f"has no match under {mapping}")
                break
        else:
            return True, mapping
    return False, witness
