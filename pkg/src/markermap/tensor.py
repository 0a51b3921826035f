"""Dense float64 matrices and a tape-based reverse-mode autodiff engine.

The graph is define-by-run: every operation builds a `Node` holding its
forward value and a backward closure. `backward(loss)` does one reverse
topological sweep; gradients accumulate on nodes flagged `requires_grad`
(zero them between steps). All arithmetic goes through the kernel backend,
so results do not depend on whether the compiled core is available.
"""

from array import array

from markermap._core import K
from markermap.errors import ShapeError


def _buf(n):
    return array("d", bytes(8 * n))


class Matrix:
    """Dense row-major float64 matrix backed by a flat array('d')."""

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows, cols, data=None):
        if rows < 1 or cols < 1:
            raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
        if data is None:
            data = _buf(rows * cols)
        elif len(data) != rows * cols:
            raise ShapeError(
                f"buffer of length {len(data)} cannot back a {rows}x{cols} matrix"
            )
        self.rows = rows
        self.cols = cols
        self.data = data

    @classmethod
    def zeros(cls, rows, cols):
        return cls(rows, cols)

    @classmethod
    def full(cls, rows, cols, value):
        m = cls(rows, cols)
        K.fill(m.data, float(value), rows * cols)
        return m

    @classmethod
    def from_rows(cls, rows_of_values):
        rows = len(rows_of_values)
        cols = len(rows_of_values[0])
        m = cls(rows, cols)
        pos = 0
        for row in rows_of_values:
            if len(row) != cols:
                raise ShapeError("ragged rows cannot form a matrix")
            for v in row:
                m.data[pos] = float(v)
                pos += 1
        return m

    @classmethod
    def row_vector(cls, values):
        return cls.from_rows([list(values)])

    @classmethod
    def scalar(cls, value):
        m = cls(1, 1)
        m.data[0] = float(value)
        return m

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def size(self):
        return self.rows * self.cols

    def get(self, i, j):
        return self.data[i * self.cols + j]

    def set(self, i, j, value):
        self.data[i * self.cols + j] = float(value)

    def row(self, i):
        start = i * self.cols
        return list(self.data[start : start + self.cols])

    def to_rows(self):
        return [self.row(i) for i in range(self.rows)]

    def column(self, j):
        return [self.data[i * self.cols + j] for i in range(self.rows)]

    def clone(self):
        return Matrix(self.rows, self.cols, array("d", self.data))

    def fill(self, value):
        K.fill(self.data, float(value), self.size)

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.rows}x{self.cols}")
        return self.data[0]

    def is_finite(self):
        return bool(K.all_finite(self.data, self.size))

    def __eq__(self, other):
        return (
            isinstance(other, Matrix)
            and self.shape == other.shape
            and self.data == other.data
        )

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Node:
    """One tape entry: forward value plus backward closure."""

    __slots__ = ("value", "grad", "parents", "_bw", "requires_grad", "name")

    def __init__(self, value, parents=(), bw=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self._bw = bw
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def ensure_grad(self):
        if self.grad is None:
            self.grad = Matrix.zeros(self.value.rows, self.value.cols)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad else "node")
        return f"Node({tag}, {self.value.rows}x{self.value.cols})"


def parameter(matrix, name=None):
    return Node(matrix, requires_grad=True, name=name)


def constant(matrix):
    return Node(matrix)


# -- graph construction -----------------------------------------------------


def matmul(a, b):
    """a(n,k) @ b(k,m). Backward: g@b^T into a, a^T@g into b."""
    n, k = a.value.shape
    k2, m = b.value.shape
    if k != k2:
        raise ShapeError(f"matmul: inner dimensions differ, {a.value.shape} x {b.value.shape}")
    out = Matrix.zeros(n, m)
    K.matmul_acc(a.value.data, b.value.data, out.data, n, k, m)
    av, bv = a.value, b.value

    def bw(g, gp):
        if gp[0] is not None:
            K.matmul_abt_acc(g, bv.data, gp[0], n, m, k)
        if gp[1] is not None:
            K.matmul_atb_acc(av.data, g, gp[1], n, k, m)

    return Node(out, (a, b), bw)


def matmul_bt(a, b):
    """a(n,d) @ b(m,d)^T -> (n,m). Used for selector projection X @ gamma^T."""
    n, d = a.value.shape
    m, d2 = b.value.shape
    if d != d2:
        raise ShapeError(f"matmul_bt: column counts differ, {a.value.shape} x {b.value.shape}")
    out = Matrix.zeros(n, m)
    K.matmul_abt_acc(a.value.data, b.value.data, out.data, n, d, m)
    av, bv = a.value, b.value

    def bw(g, gp):
        if gp[0] is not None:
            K.matmul_acc(g, bv.data, gp[0], n, m, d)
        if gp[1] is not None:
            K.matmul_atb_acc(g, av.data, gp[1], n, m, d)

    return Node(out, (a, b), bw)


def add(a, b):
    _same_shape(a.value, b.value, "add")
    out = Matrix.zeros(*a.value.shape)
    n = out.size
    K.add(a.value.data, b.value.data, out.data, n)

    def bw(g, gp):
        if gp[0] is not None:
            K.acc(g, gp[0], n)
        if gp[1] is not None:
            K.acc(g, gp[1], n)

    return Node(out, (a, b), bw)


def sub(a, b):
    _same_shape(a.value, b.value, "sub")
    out = Matrix.zeros(*a.value.shape)
    n = out.size
    K.sub(a.value.data, b.value.data, out.data, n)

    def bw(g, gp):
        if gp[0] is not None:
            K.acc(g, gp[0], n)
        if gp[1] is not None:
            K.acc_scaled(g, -1.0, gp[1], n)

    return Node(out, (a, b), bw)


def mul(a, b):
    _same_shape(a.value, b.value, "mul")
    out = Matrix.zeros(*a.value.shape)
    n = out.size
    K.mul(a.value.data, b.value.data, out.data, n)
    av, bv = a.value, b.value

    def bw(g, gp):
        if gp[0] is not None:
            K.acc_mul(g, bv.data, gp[0], n)
        if gp[1] is not None:
            K.acc_mul(g, av.data, gp[1], n)

    return Node(out, (a, b), bw)


def scale(a, alpha):
    out = Matrix.zeros(*a.value.shape)
    n = out.size
    alpha = float(alpha)
    K.scale(a.value.data, alpha, out.data, n)

    def bw(g, gp):
        if gp[0] is not None:
            K.acc_scaled(g, alpha, gp[0], n)

    return Node(out, (a,), bw)


def leaky_relu(a, slope=0.01):
    out = Matrix.zeros(*a.value.shape)
    n = out.size
    slope = float(slope)
    K.leaky_relu(a.value.data, slope, out.data, n)
    av = a.value

    def bw(g, gp):
        if gp[0] is not None:
            K.leaky_relu_grad(av.data, slope, g, gp[0], n)

    return Node(out, (a,), bw)


def exp(a):
    out = Matrix.zeros(*a.value.shape)
    n = out.size
    K.vexp(a.value.data, out.data, n)

    def bw(g, gp):
        if gp[0] is not None:
            K.acc_mul(g, out.data, gp[0], n)

    return Node(out, (a,), bw)


def log(a):
    n = a.value.size
    if K.vmin(a.value.data, n) <= 0.0:
        raise ValueError("log: all entries must be positive")
    out = Matrix.zeros(*a.value.shape)
    K.vlog(a.value.data, out.data, n)
    av = a.value

    def bw(g, gp):
        if gp[0] is not None:
            K.acc_div(g, av.data, gp[0], n)

    return Node(out, (a,), bw)


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    out = Matrix.zeros(*a.value.shape)
    n = out.size
    floor = float(floor)
    K.clamp_min(a.value.data, floor, out.data, n)
    av = a.value

    def bw(g, gp):
        if gp[0] is not None:
            K.clamp_min_grad(av.data, floor, g, gp[0], n)

    return Node(out, (a,), bw)


def softmax_rows(a, temperature=1.0):
    """Row-wise softmax(z / temperature), max-subtracted for stability."""
    if temperature <= 0.0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    n, d = a.value.shape
    out = Matrix.zeros(n, d)
    tau = float(temperature)
    K.softmax_rows(a.value.data, tau, out.data, n, d)

    def bw(g, gp):
        if gp[0] is not None:
            K.softmax_rows_grad(out.data, g, tau, gp[0], n, d)

    return Node(out, (a,), bw)


def add_bias(x, b):
    """x(n,d) + row vector b(1,d) broadcast over rows."""
    n, d = x.value.shape
    if b.value.shape != (1, d):
        raise ShapeError(f"add_bias: bias {b.value.shape} does not broadcast over {x.value.shape}")
    out = Matrix.zeros(n, d)
    K.add_bias(x.value.data, b.value.data, out.data, n, d)

    def bw(g, gp):
        if gp[0] is not None:
            K.acc(g, gp[0], n * d)
        if gp[1] is not None:
            K.col_sum_acc(g, gp[1], n, d)

    return Node(out, (x, b), bw)


def col_mean(a):
    """Column means: (n,d) -> (1,d)."""
    n, d = a.value.shape
    out = Matrix.zeros(1, d)
    K.col_mean(a.value.data, out.data, n, d)

    def bw(g, gp):
        if gp[0] is not None:
            K.bcast_row_acc(g, 1.0 / n, gp[0], n, d)

    return Node(out, (a,), bw)


def tile_rows(v, count):
    """Repeat a (1,d) row `count` times -> (count,d)."""
    if v.value.rows != 1:
        raise ShapeError(f"tile_rows expects a row vector, got {v.value.shape}")
    d = v.value.cols
    out = Matrix.zeros(count, d)
    K.tile_rows(v.value.data, out.data, count, d)

    def bw(g, gp):
        if gp[0] is not None:
            K.col_sum_acc(g, gp[0], count, d)

    return Node(out, (v,), bw)


def stack_rows(nodes):
    """Stack (1,d) rows into one (len,d) matrix."""
    d = nodes[0].value.cols
    for nd in nodes:
        if nd.value.shape != (1, d):
            raise ShapeError("stack_rows expects matching (1,d) rows")
    out = Matrix.zeros(len(nodes), d)
    for i, nd in enumerate(nodes):
        out.data[i * d : (i + 1) * d] = nd.value.data

    def bw(g, gp):
        for i, slot in enumerate(gp):
            if slot is not None:
                K.acc(g[i * d : (i + 1) * d], slot, d)

    return Node(out, tuple(nodes), bw)


# -- scalar losses -----------------------------------------------------------


def mse(pred, target):
    """Mean squared deviation over all entries; target is a plain Matrix."""
    _same_shape(pred.value, target, "mse")
    n = pred.value.size
    diff = _buf(n)
    K.sub(pred.value.data, target.data, diff, n)
    value = K.dot(diff, diff, n) / n

    def bw(g, gp):
        if gp[0] is not None:
            K.acc_scaled(diff, 2.0 * g[0] / n, gp[0], n)

    return Node(Matrix.scalar(value), (pred,), bw)


def cross_entropy(probs, labels):
    """Mean negative log of the predicted probability of the true class.

    `probs` holds class probabilities per row (softmax output); `labels` are
    integer class ids in [0, cols).
    """
    n, c = probs.value.shape
    if len(labels) != n:
        raise ShapeError(f"cross_entropy: {n} rows but {len(labels)} labels")
    lab = array("q", (int(y) for y in labels))
    for y in lab:
        if y < 0 or y >= c:
            raise ValueError(f"class id {y} out of range [0, {c})")
    value = K.ce_forward(probs.value.data, lab, n, c)
    pv = probs.value

    def bw(g, gp):
        if gp[0] is not None:
            K.ce_backward_acc(pv.data, lab, g[0], gp[0], n, c)

    return Node(Matrix.scalar(value), (probs,), bw)


def gaussian_kl(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over dims, mean over rows."""
    _same_shape(mean.value, logvar.value, "gaussian_kl")
    n_rows = mean.value.rows
    n = mean.value.size
    var = _buf(n)
    K.vexp(logvar.value.data, var, n)
    total = 0.0
    mdata = mean.value.data
    lvdata = logvar.value.data
    for i in range(n):
        total += mdata[i] * mdata[i] + var[i] - lvdata[i] - 1.0
    value = 0.5 * total / n_rows

    def bw(g, gp):
        if gp[0] is not None:
            K.acc_scaled(mdata, g[0] / n_rows, gp[0], n)
        if gp[1] is not None:
            half = 0.5 * g[0] / n_rows
            K.acc_scaled(var, half, gp[1], n)
            K.acc_const(-half, gp[1], n)

    return Node(Matrix.scalar(value), (mean, logvar), bw)


# -- backward sweep -----------------------------------------------------------


def topo_order(root):
    """Parents-first topological order of the graph reachable from root."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Reverse sweep from a scalar root; accumulates into requires_grad nodes."""
    if root.value.size != 1:
        raise ShapeError(
            f"backward needs a scalar root, got {root.value.rows}x{root.value.cols}"
        )
    order = topo_order(root)
    needs = {}
    for node in order:
        needs[id(node)] = node.requires_grad or any(needs[id(p)] for p in node.parents)
    if not needs[id(root)]:
        return
    grads = {id(root): array("d", [1.0])}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._bw is None:
            continue
        gp = []
        for p in node.parents:
            if needs[id(p)]:
                slot = grads.get(id(p))
                if slot is None:
                    slot = _buf(p.value.size)
                    grads[id(p)] = slot
                gp.append(slot)
            else:
                gp.append(None)
        node._bw(g, gp)
    for node in order:
        if node.requires_grad and id(node) in grads:
            node.ensure_grad()
            K.acc(grads[id(node)], node.grad.data, node.value.size)
