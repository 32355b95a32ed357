"""Continuous-action distiller: expression-tree search over concepts.

Candidate policies are prefix-serializable trees over {+, -, *, /, log,
exp}, concept variables and fitted constants. A small recurrent
generator proposes token sequences (infeasible tokens masked to exactly
zero probability), candidates are scored by behavioral fidelity
J = 1/(1 + MSE) against the teacher's pre-activation target, and the
generator is updated with a risk-seeking policy gradient whose baseline
is the batch's top-quantile reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nets import AdamState

DIV_EPS = 1e-6
LOG_EPS = 1e-9
EXP_CAP = 30.0
VALUE_CAP = 1e100

BINARY_OPS = ("+", "-", "*", "/")
UNARY_OPS = ("log", "exp")


class Node:
    """Expression node: kind in {'op2','op1','var','const'}."""

    __slots__ = ("kind", "op", "index", "value", "children")

    def __init__(self, kind, op=None, index=None, value=None, children=()):
        self.kind = kind
        self.op = op
        self.index = index
        self.value = value
        self.children = list(children)

    def copy(self) -> "Node":
        return Node(self.kind, self.op, self.index, self.value,
                    [c.copy() for c in self.children])


@dataclass
class ExpressionTree:
    root: Node
    n_vars: int

    def __post_init__(self):
        for node in self.walk():
            if node.kind == "var" and not (0 <= node.index < self.n_vars):
                raise ValueError(f"variable index {node.index} out of range")
            if node.kind == "const" and not math.isfinite(node.value):
                raise ValueError("constants must be finite")

    def walk(self):
        stack = [self.root]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(reversed(n.children))

    @property
    def depth(self) -> int:
        """Edge depth: a bare leaf has depth 0."""

        def d(n: Node) -> int:
            if not n.children:
                return 0
            return 1 + max(d(c) for c in n.children)

        return d(self.root)

    @property
    def node_count(self) -> int:
        return sum(1 for _ in self.walk())

    def constants(self) -> list[Node]:
        return [n for n in self.walk() if n.kind == "const"]

    def copy(self) -> "ExpressionTree":
        return ExpressionTree(self.root.copy(), self.n_vars)

    def __str__(self) -> str:
        return print_prefix(self)


# -- protected evaluation ----------------------------------------------------


def _protected_div(a, b):
    safe = np.where(b >= 0.0, np.maximum(b, DIV_EPS), np.minimum(b, -DIV_EPS))
    return a / safe


def _clamp(v):
    return np.minimum(np.maximum(v, -VALUE_CAP), VALUE_CAP)


def evaluate(tree: ExpressionTree, concepts: np.ndarray) -> np.ndarray:
    """Vectorized evaluation over a (N, K) concept matrix -> (N,)."""
    c = np.asarray(concepts, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] < tree.n_vars:
        raise ValueError("concept matrix must be (N, K) with K >= tree variables")
    out = _eval_node(tree.root, c)
    if np.isscalar(out) or out.ndim == 0:
        out = np.full(c.shape[0], float(out))
    return out


def _eval_node(n: Node, c: np.ndarray):
    if n.kind == "var":
        return c[:, n.index]
    if n.kind == "const":
        return np.full(c.shape[0], n.value)
    if n.kind == "op1":
        x = _eval_node(n.children[0], c)
        if n.op == "log":
            return np.log(np.abs(x) + LOG_EPS)
        return np.exp(np.minimum(x, EXP_CAP))
    a = _eval_node(n.children[0], c)
    b = _eval_node(n.children[1], c)
    if n.op == "+":
        return _clamp(a + b)
    if n.op == "-":
        return _clamp(a - b)
    if n.op == "*":
        return _clamp(a * b)
    return _clamp(_protected_div(a, b))


def eval_expression(tree: ExpressionTree, concept_vector: np.ndarray) -> float:
    """Scalar evaluation on one concept vector; total by protection."""
    c = np.asarray(concept_vector, dtype=np.float64)
    return float(evaluate(tree, c[None, :])[0])


def _forward_cached(n: Node, c: np.ndarray, cache: dict):
    if n.kind == "var":
        v = c[:, n.index]
    elif n.kind == "const":
        v = np.full(c.shape[0], n.value)
    elif n.kind == "op1":
        x = _forward_cached(n.children[0], c, cache)
        v = np.log(np.abs(x) + LOG_EPS) if n.op == "log" else np.exp(np.minimum(x, EXP_CAP))
    else:
        a = _forward_cached(n.children[0], c, cache)
        b = _forward_cached(n.children[1], c, cache)
        if n.op == "+":
            v = _clamp(a + b)
        elif n.op == "-":
            v = _clamp(a - b)
        elif n.op == "*":
            v = _clamp(a * b)
        else:
            v = _clamp(_protected_div(a, b))
    cache[id(n)] = v
    return v


def _backward_const_grads(n: Node, grad, cache: dict, out: dict):
    if n.kind == "const":
        out[id(n)] = out.get(id(n), 0.0) + float(np.sum(grad))
        return
    if n.kind == "var":
        return
    inside = np.abs(cache[id(n)]) < VALUE_CAP  # clamp gate on op outputs
    if n.kind == "op1":
        x = cache[id(n.children[0])]
        if n.op == "log":
            g = grad * np.sign(x) / (np.abs(x) + LOG_EPS)
        else:
            g = grad * cache[id(n)] * (x <= EXP_CAP)
        _backward_const_grads(n.children[0], g, cache, out)
        return
    a = cache[id(n.children[0])]
    b = cache[id(n.children[1])]
    grad = grad * inside
    if n.op == "+":
        ga, gb = grad, grad
    elif n.op == "-":
        ga, gb = grad, -grad
    elif n.op == "*":
        ga, gb = grad * b, grad * a
    else:
        safe = np.where(b >= 0.0, np.maximum(b, DIV_EPS), np.minimum(b, -DIV_EPS))
        ga = grad / safe
        gb = np.where(np.abs(b) >= DIV_EPS, -grad * a / (safe * safe), 0.0)
    _backward_const_grads(n.children[0], ga, cache, out)
    _backward_const_grads(n.children[1], gb, cache, out)


def constant_grads(tree: ExpressionTree, concepts: np.ndarray, target: np.ndarray
                   ) -> tuple[float, np.ndarray]:
    """MSE and its gradient w.r.t. the tree's constants (walk order)."""
    c = np.asarray(concepts, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    cache: dict = {}
    pred = _forward_cached(tree.root, c, cache)
    resid = pred - y
    mse = float(np.mean(resid * resid))
    grads: dict = {}
    _backward_const_grads(tree.root, 2.0 * resid / len(y), cache, grads)
    consts = tree.constants()
    return mse, np.array([grads.get(id(n), 0.0) for n in consts])


class _LinearTree:
    """Post-order instruction list for fast repeated evaluation of one
    structure while its constants change.

    Positions with no constant beneath them are evaluated once per fit;
    each optimizer step recomputes only the constant-dependent spine and
    backpropagates only along it. Constant leaves stay scalars and rely
    on numpy broadcasting.
    """

    __slots__ = ("ops", "const_slots", "n", "dep", "slot_of")

    def __init__(self, tree: ExpressionTree):
        ops: list[tuple] = []
        const_slots: list[int] = []
        dep: list[bool] = []

        def visit(node: Node) -> int:
            child_pos = [visit(ch) for ch in node.children]
            pos = len(ops)
            if node.kind == "const":
                const_slots.append(pos)
            ops.append((node.kind, node.op, node.index, node.value, child_pos))
            dep.append(node.kind == "const" or any(dep[k] for k in child_pos))
            return pos

        visit(tree.root)
        self.ops = ops
        self.const_slots = const_slots
        self.n = len(ops)
        self.dep = dep
        self.slot_of = {pos: i for i, pos in enumerate(const_slots)}

    def _eval_pos(self, pos: int, vals: list, c: np.ndarray):
        kind, op, index, _value, kids = self.ops[pos]
        if kind == "var":
            return c[:, index]
        if kind == "op1":
            x = vals[kids[0]]
            if op == "log":
                return np.log(np.abs(x) + LOG_EPS)
            return np.exp(np.minimum(x, EXP_CAP))
        a, b = vals[kids[0]], vals[kids[1]]
        if op == "+":
            v = a + b
        elif op == "-":
            v = a - b
        elif op == "*":
            v = a * b
        else:
            v = _protected_div(a, b)
        return _clamp(v)

    def static_pass(self, c: np.ndarray) -> list:
        """Evaluate every constant-independent position once."""
        vals: list = [None] * self.n
        for pos in range(self.n):
            if not self.dep[pos]:
                vals[pos] = self._eval_pos(pos, vals, c)
        return vals

    def mse_and_grads(self, c: np.ndarray, y: np.ndarray, const_vals: np.ndarray,
                      static_vals: list | None = None) -> tuple[float, np.ndarray]:
        if static_vals is None:
            static_vals = self.static_pass(c)
        vals = list(static_vals)
        ci = 0
        for pos in range(self.n):
            if not self.dep[pos]:
                continue
            if self.ops[pos][0] == "const":
                vals[pos] = const_vals[ci]
                ci += 1
            else:
                vals[pos] = self._eval_pos(pos, vals, c)
        resid = vals[-1] - y
        mse = float(np.mean(resid * resid))

        adj: list = [None] * self.n
        adj[-1] = 2.0 * resid / len(y)
        grads = np.zeros(len(self.const_slots))
        for pos in range(self.n - 1, -1, -1):
            g = adj[pos]
            if g is None or not self.dep[pos]:
                continue
            kind, op, _index, _value, kids = self.ops[pos]
            if kind == "const":
                grads[self.slot_of[pos]] += float(np.sum(g))
                continue
            if kind == "op1":
                if not self.dep[kids[0]]:
                    continue
                x = vals[kids[0]]
                if op == "log":
                    gx = g * np.sign(x) / (np.abs(x) + LOG_EPS)
                else:
                    gx = g * vals[pos] * (x <= EXP_CAP)
                adj[kids[0]] = gx if adj[kids[0]] is None else adj[kids[0]] + gx
                continue
            a, b = vals[kids[0]], vals[kids[1]]
            g = g * (np.abs(vals[pos]) < VALUE_CAP)
            if op == "+":
                ga, gb = g, g
            elif op == "-":
                ga, gb = g, -g
            elif op == "*":
                ga, gb = g * b, g * a
            else:
                safe = np.where(b >= 0.0, np.maximum(b, DIV_EPS),
                                np.minimum(b, -DIV_EPS))
                ga = g / safe
                gb = np.where(np.abs(b) >= DIV_EPS, -g * a / (safe * safe), 0.0)
            if self.dep[kids[0]]:
                adj[kids[0]] = ga if adj[kids[0]] is None else adj[kids[0]] + ga
            if self.dep[kids[1]]:
                adj[kids[1]] = gb if adj[kids[1]] is None else adj[kids[1]] + gb
        return mse, grads


def mse_of(tree: ExpressionTree, concepts: np.ndarray, target: np.ndarray) -> float:
    pred = evaluate(tree, concepts)
    resid = pred - np.asarray(target, dtype=np.float64)
    return float(np.mean(resid * resid))


def fidelity_reward(tree: ExpressionTree, concepts: np.ndarray,
                    target: np.ndarray) -> float:
    """Behavioral fidelity J = (1 + MSE)^-1 in (0, 1]; 1 iff MSE = 0."""
    if len(np.asarray(target)) == 0:
        raise ValueError("fidelity reward needs a nonempty dataset")
    m = mse_of(tree, concepts, target)
    if not math.isfinite(m):
        return 0.0
    return 1.0 / (1.0 + m)


def fit_constants(tree: ExpressionTree, concepts: np.ndarray, target: np.ndarray,
                  steps: int = 50, lr: float = 0.1) -> ExpressionTree:
    """Gradient descent with a doubling/halving line search on MSE over the
    tree's constants; the best-seen values are kept, so the returned tree
    never scores worse than the input."""
    consts = tree.constants()
    if not consts:
        return tree
    vals = np.array([float(n.value) for n in consts])

    def set_vals(v: np.ndarray) -> None:
        for node, x in zip(consts, v):
            node.value = float(x)

    def mse_at(v: np.ndarray) -> float:
        set_vals(v)
        return mse_of(tree, concepts, target)

    set_vals(vals)
    best_mse, grad = constant_grads(tree, concepts, target)
    best_vals = vals.copy()
    eta = lr
    for _ in range(steps):
        if not np.all(np.isfinite(grad)):
            break
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-14:
            break
        direction = -grad / gnorm
        step_best_eta = 0.0
        step_best = best_mse if np.array_equal(vals, best_vals) else mse_at(vals)
        trial = eta
        for _ in range(14):
            m = mse_at(vals + trial * direction)
            if math.isfinite(m) and m < step_best:
                step_best = m
                step_best_eta = trial
                trial *= 2.0
            elif step_best_eta > 0.0:
                break
            else:
                trial *= 0.25
                if trial < 1e-13:
                    break
        if step_best_eta == 0.0:
            break
        vals = vals + step_best_eta * direction
        eta = step_best_eta
        set_vals(vals)
        mse, grad = constant_grads(tree, concepts, target)
        if mse < best_mse:
            best_mse = mse
            best_vals = vals.copy()
    set_vals(best_vals)
    return tree


def _fit_constants_adam(tree: ExpressionTree, concepts: np.ndarray,
                        target: np.ndarray, steps: int, lr: float
                        ) -> ExpressionTree:
    """Cheap fixed-budget Adam fit used inside the search loop; candidates
    that survive to best-ever get the full line-search fit afterwards."""
    consts = tree.constants()
    if not consts:
        return tree
    lin = _LinearTree(tree)
    static_vals = lin.static_pass(concepts)
    vals = np.array([float(n.value) for n in consts])
    m = np.zeros_like(vals)
    v2 = np.zeros_like(vals)
    best_vals = vals.copy()
    best_mse, grad = lin.mse_and_grads(concepts, target, vals, static_vals)
    for step in range(steps):
        if not np.all(np.isfinite(grad)):
            break
        lr_t = lr * (1.0 + math.cos(math.pi * step / steps)) / 2.0
        m = 0.9 * m + 0.1 * grad
        v2 = 0.999 * v2 + 0.001 * grad * grad
        mhat = m / (1.0 - 0.9 ** (step + 1))
        vhat = v2 / (1.0 - 0.999 ** (step + 1))
        vals = vals - lr_t * mhat / (np.sqrt(vhat) + 1e-8)
        mse, grad = lin.mse_and_grads(concepts, target, vals, static_vals)
        if mse < best_mse:
            best_mse = mse
            best_vals = vals.copy()
    # constants are leaves, so pre-order and post-order agree on their
    # left-to-right order
    for node, val in zip(consts, best_vals):
        node.value = float(val)
    return tree


# -- serialization -----------------------------------------------------------


def print_prefix(tree: ExpressionTree) -> str:
    """Canonical prefix form, with (log (+ 1 x)) sugared as (log1p x)."""

    def fmt(n: Node) -> str:
        if n.kind == "var":
            return f"c{n.index}"
        if n.kind == "const":
            return repr(n.value)
        if n.kind == "op1":
            child = n.children[0]
            if (
                n.op == "log"
                and child.kind == "op2"
                and child.op == "+"
                and child.children[0].kind == "const"
                and child.children[0].value == 1.0
            ):
                return f"(log1p {fmt(child.children[1])})"
            return f"({n.op} {fmt(child)})"
        return f"({n.op} {fmt(n.children[0])} {fmt(n.children[1])})"

    return fmt(tree.root)


def print_infix(tree: ExpressionTree) -> str:
    """Readable infix form for reports."""
    prec = {"+": 1, "-": 1, "*": 2, "/": 2}

    def fmt(n: Node, parent_prec: int) -> str:
        if n.kind == "var":
            return f"c{n.index}"
        if n.kind == "const":
            return f"{n.value:.4g}"
        if n.kind == "op1":
            child = n.children[0]
            if (
                n.op == "log"
                and child.kind == "op2"
                and child.op == "+"
                and child.children[0].kind == "const"
                and child.children[0].value == 1.0
            ):
                return f"log(1 + {fmt(child.children[1], 0)})"
            return f"{n.op}({fmt(child, 0)})"
        p = prec[n.op]
        left = fmt(n.children[0], p)
        right = fmt(n.children[1], p + 1)  # right-assoc needs parens at equal prec
        s = f"{left} {n.op} {right}"
        return f"({s})" if p < parent_prec else s

    return fmt(tree.root, 0)


def parse_expression(text: str, n_vars: int) -> ExpressionTree:
    """Parse the canonical prefix form back into a tree."""
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse() -> Node:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("unexpected end of expression")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            if pos >= len(tokens):
                raise ValueError("unexpected end of expression")
            op = tokens[pos]
            pos += 1
            if op == "log1p":
                inner = parse()
                node = Node("op1", op="log",
                            children=[Node("op2", op="+",
                                           children=[Node("const", value=1.0), inner])])
            elif op in UNARY_OPS:
                node = Node("op1", op=op, children=[parse()])
            elif op in BINARY_OPS:
                node = Node("op2", op=op, children=[parse(), parse()])
            else:
                raise ValueError(f"unknown operator: {op!r}")
            if pos >= len(tokens) or tokens[pos] != ")":
                raise ValueError("missing closing paren")
            pos += 1
            return node
        if tok == ")":
            raise ValueError("unexpected ')'")
        if tok.startswith("c") and tok[1:].isdigit():
            return Node("var", index=int(tok[1:]))
        return Node("const", value=float(tok))

    root = parse()
    if pos != len(tokens):
        raise ValueError("trailing tokens after expression")
    return ExpressionTree(root, n_vars)


def compile_tree(tree: ExpressionTree):
    """Compile to a scalar python callable over a concept sequence.

    Constant-folds nothing beyond what the tree already carries; uses the
    same protected semantics as evaluate().
    """

    def emit(n: Node) -> str:
        if n.kind == "var":
            return f"c[{n.index}]"
        if n.kind == "const":
            return repr(n.value)
        if n.kind == "op1":
            inner = emit(n.children[0])
            if n.op == "log":
                return f"_log(abs({inner}) + {LOG_EPS})"
            return f"_exp(min({inner}, {EXP_CAP}))"
        a = emit(n.children[0])
        b = emit(n.children[1])
        if n.op == "/":
            return f"_clip(_pdiv({a}, {b}))"
        return f"_clip({a} {n.op} {b})"

    src = f"lambda c: {emit(tree.root)}"
    env = {
        "__builtins__": {},
        "_log": math.log,
        "_exp": math.exp,
        "_pdiv": lambda a, b: a / (max(b, DIV_EPS) if b >= 0 else min(b, -DIV_EPS)),
        "_clip": lambda v: min(max(v, -VALUE_CAP), VALUE_CAP),
        "abs": abs,
        "min": min,
        "max": max,
    }
    return eval(src, env)  # names resolve through the lambda's globals


# -- token alphabet ----------------------------------------------------------


@dataclass
class TokenSpec:
    name: str
    arity: int


def build_alphabet(n_vars: int, operators: tuple[str, ...] = BINARY_OPS + UNARY_OPS,
                   include_const: bool = True) -> list[TokenSpec]:
    alpha = []
    for op in operators:
        if op in BINARY_OPS:
            alpha.append(TokenSpec(op, 2))
        elif op in UNARY_OPS:
            alpha.append(TokenSpec(op, 1))
        else:
            raise ValueError(f"unknown operator: {op!r}")
    alpha.extend(TokenSpec(f"c{k}", 0) for k in range(n_vars))
    if include_const:
        alpha.append(TokenSpec("const", 0))
    return alpha


def tokens_to_tree(token_ids: list[int], alphabet: list[TokenSpec], n_vars: int,
                   const_init: float = 1.0) -> ExpressionTree:
    pos = 0

    def build() -> Node:
        nonlocal pos
        spec = alphabet[token_ids[pos]]
        pos += 1
        if spec.arity == 2:
            return Node("op2", op=spec.name, children=[build(), build()])
        if spec.arity == 1:
            return Node("op1", op=spec.name, children=[build()])
        if spec.name == "const":
            return Node("const", value=const_init)
        return Node("var", index=int(spec.name[1:]))

    root = build()
    if pos != len(token_ids):
        raise ValueError("token sequence does not form exactly one tree")
    return ExpressionTree(root, n_vars)


# -- generator ---------------------------------------------------------------


class Generator:
    """Recurrent categorical sequence model over the expression alphabet.

    Pre-order generation with a slot stack, conditioned on the previous
    token and the open slot's parent token. Tokens that cannot complete a
    tree within the depth bound get exactly zero probability, as do
    degenerate picks (direct inverse-op nesting, constant-foldable leaf
    placements) except at the root, where a bare constant stays legal.
    """

    START = -1

    def __init__(self, n_vars: int, hidden: int = 32,
                 operators: tuple[str, ...] = BINARY_OPS + UNARY_OPS,
                 include_const: bool = True, seed: int = 0):
        if n_vars < 1:
            raise ConfigError("generator needs at least one variable token")
        self.n_vars = n_vars
        self.hidden = hidden
        self.alphabet = build_alphabet(n_vars, operators, include_const)
        v = len(self.alphabet)
        rng = np.random.default_rng(seed)
        s = 0.1
        # input = [onehot(prev token + start), onehot(parent token + start)]
        self.w_xh = rng.normal(0.0, s, size=(hidden, 2 * (v + 1)))
        self.w_hh = rng.normal(0.0, s, size=(hidden, hidden))
        self.b_h = np.zeros(hidden)
        self.w_hy = rng.normal(0.0, s, size=(v, hidden))
        self.b_y = np.zeros(v)
        self._const_id = next(
            (i for i, t in enumerate(self.alphabet) if t.name == "const"), None
        )
        self._tok_id = {t.name: i for i, t in enumerate(self.alphabet)}

    @property
    def vocab(self) -> int:
        return len(self.alphabet)

    def get_params(self) -> np.ndarray:
        return np.concatenate([
            self.w_xh.ravel(), self.w_hh.ravel(), self.b_h,
            self.w_hy.ravel(), self.b_y,
        ])

    def set_params(self, flat: np.ndarray) -> None:
        v, h = self.vocab, self.hidden
        sizes = [h * 2 * (v + 1), h * h, h, v * h, v]
        shapes = [(h, 2 * (v + 1)), (h, h), (h,), (v, h), (v,)]
        names = ["w_xh", "w_hh", "b_h", "w_hy", "b_y"]
        i = 0
        for size, shape, name in zip(sizes, shapes, names):
            setattr(self, name, flat[i : i + size].reshape(shape).copy())
            i += size

    def _feasible_mask(self, slot) -> np.ndarray:
        depth, parent, left_const, d_max = slot
        mask = np.ones(self.vocab, dtype=bool)
        if depth >= d_max:
            for j, spec in enumerate(self.alphabet):
                if spec.arity > 0:
                    mask[j] = False
        if parent in ("log", "exp"):
            inverse = "exp" if parent == "log" else "log"
            if inverse in self._tok_id:
                mask[self._tok_id[inverse]] = False
            if self._const_id is not None:
                mask[self._const_id] = False  # unary of a constant folds
        if left_const and self._const_id is not None:
            mask[self._const_id] = False  # binary op of two constants folds
        return mask

    def _step_hidden(self, h_prev, prev_idx, parent_idx):
        v = self.vocab
        pre = (self.w_xh[:, prev_idx].T + self.w_xh[:, (v + 1) + parent_idx].T
               + h_prev @ self.w_hh.T + self.b_h)
        return np.tanh(pre)

    def sample(self, batch: int, d_max: int, rng: np.random.Generator):
        """Sample a batch of complete token sequences.

        Returns (token_lists, trace); the trace holds everything
        policy_gradient() needs, in lockstep arrays.
        """
        v, hdim = self.vocab, self.hidden
        tokens: list[list[int]] = [[] for _ in range(batch)]
        # slot: (depth, parent token name or None, left-sibling-was-const, d_max)
        stacks = [[(0, None, False, d_max)] for _ in range(batch)]
        h = np.zeros((batch, hdim))
        prev_idx = np.full(batch, v, dtype=int)  # start symbol
        parent_idx = np.full(batch, v, dtype=int)
        active = np.ones(batch, dtype=bool)
        steps = []
        while np.any(active):
            for i in range(batch):
                if active[i]:
                    parent = stacks[i][-1][1]
                    parent_idx[i] = self._tok_id[parent] if parent else v
            h_new = self._step_hidden(h, prev_idx, parent_idx)
            logits = h_new @ self.w_hy.T + self.b_y
            mask = np.zeros((batch, v), dtype=bool)
            for i in range(batch):
                if active[i]:
                    mask[i] = self._feasible_mask(stacks[i][-1])
            masked = np.where(mask, logits, -np.inf)
            zmax = np.max(np.where(mask, masked, -np.inf), axis=1, keepdims=True)
            zmax = np.where(np.isfinite(zmax), zmax, 0.0)
            ex = np.where(mask, np.exp(masked - zmax), 0.0)
            probs = ex / np.maximum(ex.sum(axis=1, keepdims=True), 1e-300)
            u = rng.random(batch)
            cdf = np.cumsum(probs, axis=1)
            chosen = (u[:, None] > cdf).sum(axis=1)
            chosen = np.minimum(chosen, v - 1)
            steps.append({
                "h_prev": h.copy(), "h": h_new.copy(),
                "prev_idx": prev_idx.copy(), "parent_idx": parent_idx.copy(),
                "probs": probs, "chosen": chosen.copy(), "active": active.copy(),
            })
            for i in range(batch):
                if not active[i]:
                    continue
                tok = int(chosen[i])
                tokens[i].append(tok)
                spec = self.alphabet[tok]
                depth, parent, left_const, _ = stacks[i].pop()
                if spec.arity == 2:
                    # push right child first so the left pops first
                    stacks[i].append((depth + 1, spec.name, False, d_max))
                    stacks[i].append((depth + 1, spec.name, False, d_max))
                elif spec.arity == 1:
                    stacks[i].append((depth + 1, spec.name, False, d_max))
                else:
                    if (tok == self._const_id and stacks[i]
                            and stacks[i][-1][1] == parent):
                        # mark the sibling slot: its left sibling is a const leaf
                        d2, p2, _, m2 = stacks[i].pop()
                        stacks[i].append((d2, p2, True, m2))
                if not stacks[i]:
                    active[i] = False
            h = h_new
            prev_idx = chosen
        return tokens, steps

    def policy_gradient(self, steps: list[dict], seq_weight: np.ndarray,
                        entropy_weight: np.ndarray) -> np.ndarray:
        """Gradient of sum_i [w_i * log p(seq_i) + e_i * H(seq_i)] w.r.t.
        the flat parameters (ascent direction)."""
        v, hdim = self.vocab, self.hidden
        g_wxh = np.zeros_like(self.w_xh)
        g_whh = np.zeros_like(self.w_hh)
        g_bh = np.zeros_like(self.b_h)
        g_why = np.zeros_like(self.w_hy)
        g_by = np.zeros_like(self.b_y)
        batch = len(seq_weight)
        dh_next = np.zeros((batch, hdim))
        for step in reversed(steps):
            act = step["active"]
            probs = step["probs"]
            chosen = step["chosen"]
            h_prev, h = step["h_prev"], step["h"]
            onehot = np.zeros((batch, v))
            onehot[np.arange(batch), chosen] = 1.0
            # d(log p)/dz = onehot - p ; dH/dz = -p*(log p + H)
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = np.where(probs > 0.0, np.log(probs), 0.0)
            ent = -(probs * logp).sum(axis=1, keepdims=True)
            dz = seq_weight[:, None] * (onehot - probs)
            dz += entropy_weight[:, None] * (-probs * (logp + ent))
            dz *= act[:, None]
            dh = dz @ self.w_hy + dh_next
            g_why += dz.T @ h
            g_by += dz.sum(axis=0)
            draw = dh * (1.0 - h * h) * act[:, None]
            g_whh += draw.T @ h_prev
            g_bh += draw.sum(axis=0)
            np.add.at(g_wxh.T, step["prev_idx"], draw)
            np.add.at(g_wxh.T, (v + 1) + step["parent_idx"], draw)
            dh_next = draw @ self.w_hh
        return np.concatenate([
            g_wxh.ravel(), g_whh.ravel(), g_bh, g_why.ravel(), g_by,
        ])


# -- search ------------------------------------------------------------------


@dataclass
class DsrConfig:
    d_max: int = 6
    batch: int = 500
    iterations: int = 400
    risk_quantile: float = 0.05
    const_fit_steps: int = 20
    const_lr: float = 0.1
    fit_subsample: int = 256
    entropy_weight: float = 0.01
    hidden: int = 32
    lr: float = 0.005
    seed: int = 0
    max_evaluations: int | None = 200_000
    target_j: float | None = None

    def __post_init__(self):
        if self.d_max < 2:
            raise ConfigError("d_max must be at least 2")
        if not (0.0 < self.risk_quantile <= 0.5):
            raise ConfigError("risk quantile must lie in (0, 0.5]")
        if self.batch < 10:
            raise ConfigError("batch must be at least 10")


def sample_expressions(gen: Generator, cfg: DsrConfig,
                       rng: np.random.Generator) -> list[ExpressionTree]:
    """Draw cfg.batch syntactically complete trees within the depth bound."""
    if cfg.batch == 0:
        return []
    tokens, _ = gen.sample(cfg.batch, cfg.d_max, rng)
    return [tokens_to_tree(t, gen.alphabet, gen.n_vars) for t in tokens]


@dataclass
class DsrResult:
    tree: ExpressionTree
    best_j: float
    j_history: list[float]
    evaluations: int


def distill_continuous(concepts: np.ndarray, target: np.ndarray,
                       cfg: DsrConfig, n_vars: int | None = None) -> DsrResult:
    """Search for the most faithful expression tree on (concepts, target).

    Per iteration: sample a batch, fit constants, score J, keep the top
    risk-quantile, and ascend the generator's log-likelihood weighted by
    (J - quantile baseline). The best tree ever seen is returned with its
    per-iteration best-so-far history (non-decreasing by construction).
    """
    concepts = np.asarray(concepts, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if concepts.ndim != 2 or len(concepts) != len(target) or len(target) == 0:
        raise ValueError("need matching, nonempty concept matrix and target")
    k = concepts.shape[1] if n_vars is None else n_vars
    rng = np.random.default_rng(cfg.seed)
    gen = Generator(k, hidden=cfg.hidden, seed=cfg.seed)
    opt = AdamState.for_size(gen.get_params().size, lr=cfg.lr)

    n_fit = min(cfg.fit_subsample, len(target))
    fit_c, fit_y = concepts[:n_fit], target[:n_fit]

    best_tree: ExpressionTree | None = None
    best_j = -np.inf
    best_key: tuple = ()
    history: list[float] = []
    evaluations = 0
    seen: dict[tuple, tuple[float, list[float]]] = {}  # structure -> (J, consts)

    for _ in range(cfg.iterations):
        tokens, steps = gen.sample(cfg.batch, cfg.d_max, rng)
        trees = [tokens_to_tree(t, gen.alphabet, k) for t in tokens]
        rewards = np.empty(cfg.batch)
        for i, tree in enumerate(trees):
            key = tuple(tokens[i])
            hit = seen.get(key)
            if hit is not None:
                rewards[i] = hit[0]
                for node, val in zip(tree.constants(), hit[1]):
                    node.value = val
                continue
            if tree.constants():
                _fit_constants_adam(tree, fit_c, fit_y,
                                    steps=cfg.const_fit_steps, lr=cfg.const_lr)
            rewards[i] = fidelity_reward(tree, concepts, target)
            seen[key] = (float(rewards[i]), [n.value for n in tree.constants()])
        evaluations += cfg.batch

        # top quantile with a stable lexicographic tie-break
        order = sorted(range(cfg.batch), key=lambda i: (-rewards[i], tuple(tokens[i])))
        n_keep = max(1, math.ceil(cfg.risk_quantile * cfg.batch))
        kept = order[:n_keep]
        baseline = rewards[kept[-1]]

        improved = None
        for i in kept:
            key = (-rewards[i], tuple(tokens[i]))
            if rewards[i] > best_j or (rewards[i] == best_j and key < best_key):
                best_j = float(rewards[i])
                best_key = key
                best_tree = trees[i].copy()
                improved = i
        if improved is not None and best_tree.constants():
            # full line-search fit for the new champion
            fit_constants(best_tree, concepts, target, steps=50, lr=cfg.const_lr)
            best_j = max(best_j, fidelity_reward(best_tree, concepts, target))
        history.append(best_j)

        if cfg.target_j is not None and best_j >= cfg.target_j:
            break
        if cfg.max_evaluations is not None and evaluations + cfg.batch > cfg.max_evaluations:
            break

        seq_w = np.zeros(cfg.batch)
        ent_w = np.zeros(cfg.batch)
        seq_w[kept] = rewards[kept] - baseline
        ent_w[kept] = cfg.entropy_weight
        grad = gen.policy_gradient(steps, seq_w, ent_w)
        gen.set_params(opt.apply(gen.get_params(), -grad))  # ascent

    assert best_tree is not None
    return DsrResult(best_tree, float(best_j), history, evaluations)
