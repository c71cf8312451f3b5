"""Byte-level recurrent language model: embedding lookup, stacked LSTM
layers, linear projection, log-softmax.

Implemented directly on numpy.  Training uses truncated
backpropagation through time: lines are joined into one stream with
the null byte as separator, the stream is cut into fixed-length
chunks, hidden state values carry across chunk boundaries but
gradients do not, and the state is reset to zero whenever the
separator byte is consumed (so every line starts from the same
context).  Updates use Adam.

Gate layout along the stacked 4H axis is input, forget, candidate,
output.  The forget-gate bias starts at +1.
"""

import io
import json
import zipfile

import numpy as np
from scipy.special import expit, logsumexp

from .lm import KEPT_BYTES, LanguageModel, TrainingError, Vocabulary

PAD = 0  # separator / line-start byte

_BYTE_TO_ID = {b: i for i, b in enumerate(KEPT_BYTES)}


class CheckpointError(Exception):
    pass


def byte_tokenize(data) -> list[int]:
    """Dense token ids for a byte string; control bytes 1..31 are
    dropped (preprocessing removes them, this is the safety net)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return [_BYTE_TO_ID[b] for b in data if b == 0 or b >= 32]


class RnnConfig:
    def __init__(self, layers=2, width=64, embed_dim=16, rho=32,
                 learning_rate=2e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 batch_size=16, epochs=1, seed=0, dtype="float32"):
        if layers < 1 or width < 1 or embed_dim < 1:
            raise ValueError("layers, width and embed_dim must be >= 1")
        if rho < 2:
            raise ValueError(f"rho must be >= 2, got {rho}")
        self.layers = layers
        self.width = width
        self.embed_dim = embed_dim
        self.rho = rho
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.dtype = dtype

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _init_params(config, rng):
    """Uniform +-1/sqrt(fan_in) weights, zero biases, forget bias +1."""
    V = len(KEPT_BYTES)
    E, H, dt = config.embed_dim, config.width, config.dtype

    def u(rows, cols, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=(rows, cols)).astype(dt)

    params = {"emb": u(V, E, E), "wo": u(V, H, H), "bo": np.zeros(V, dtype=dt)}
    for l in range(config.layers):
        d_in = E if l == 0 else H
        params[f"wx{l}"] = u(4 * H, d_in, d_in)
        params[f"wh{l}"] = u(4 * H, H, H)
        b = np.zeros(4 * H, dtype=dt)
        b[H:2 * H] = 1.0
        params[f"b{l}"] = b
    return params


class RnnModel(LanguageModel):
    """Trained parameters plus the incremental scoring interface.

    A context is a (state, logprobs) pair: the per-layer hidden and
    cell vectors after consuming some prefix, and the cached
    distribution over the next byte at that point.  Contexts are
    immutable; each step allocates fresh state, so beam candidates can
    share them freely.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.vocab = Vocabulary.for_bytes()
        self.rho = None  # inference conditions on the full prefix
        self._start_ctx = None

    # --- core math ---

    def _cell(self, l, x, h, c):
        H = self.config.width
        z = self.params[f"wx{l}"] @ x + self.params[f"wh{l}"] @ h + self.params[f"b{l}"]
        i = expit(z[:H])
        f = expit(z[H:2 * H])
        g = np.tanh(z[2 * H:3 * H])
        o = expit(z[3 * H:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        return h_new, c_new

    def _advance(self, state, token_id):
        x = self.params["emb"][token_id]
        new_state = []
        for l, (h, c) in enumerate(state):
            h, c = self._cell(l, x, h, c)
            new_state.append((h, c))
            x = h
        logits = self.params["wo"] @ x + self.params["bo"]
        logits = logits.astype(np.float64)
        logps = logits - logsumexp(logits)
        return new_state, logps

    def zero_state(self):
        H, dt = self.config.width, self.config.dtype
        return [(np.zeros(H, dtype=dt), np.zeros(H, dtype=dt))
                for _ in range(self.config.layers)]

    # --- LanguageModel interface ---

    def start(self):
        if self._start_ctx is None:
            self._start_ctx = self._advance(self.zero_state(), PAD)
        return self._start_ctx

    def step(self, ctx, token_id):
        state, logps = ctx
        return logps[token_id], self._advance(state, token_id)

    def logprobs(self, ctx):
        return ctx[1]

    def units(self, text):
        return [b for b in text.encode("utf-8") if b == 0 or b >= 32]

    def unit_id(self, unit):
        return _BYTE_TO_ID[unit]

    def unit_text(self, units):
        return bytes(units).decode("utf-8", errors="replace")

    def boundary_ok_before(self, unit):
        # splitting inside a UTF-8 multi-byte sequence can never render
        # to text, so never offer a boundary before a continuation byte
        return not 0x80 <= unit < 0xC0


def forward_step(model: RnnModel, state, token_id):
    """One step from an explicit state: (new_state, logprobs)."""
    if len(state) != model.config.layers or state[0][0].shape != (model.config.width,):
        raise ValueError("state dimensions do not match the model")
    return model._advance(state, token_id)


def make_rnn(config: RnnConfig) -> RnnModel:
    return RnnModel(config, _init_params(config, np.random.default_rng(config.seed)))


# --- training ---


def _forward_chunk(params, config, xs, ys, h0, c0):
    """Forward over a (B, T) chunk.  Returns loss, caches, final state.

    Rows whose input is PAD get their incoming state zeroed first, so
    gradients naturally stop at line starts.
    """
    B, T = xs.shape
    L, H = config.layers, config.width
    h = [h0[l].copy() for l in range(L)]
    c = [c0[l].copy() for l in range(L)]
    caches = []
    loss = 0.0
    for t in range(T):
        reset = xs[:, t] == PAD
        for l in range(L):
            h[l][reset] = 0.0
            c[l][reset] = 0.0
        x = params["emb"][xs[:, t]]
        layer_cache = []
        for l in range(L):
            z = x @ params[f"wx{l}"].T + h[l] @ params[f"wh{l}"].T + params[f"b{l}"]
            i = expit(z[:, :H])
            f = expit(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = expit(z[:, 3 * H:])
            c_new = f * c[l] + i * g
            tanh_c = np.tanh(c_new)
            h_new = o * tanh_c
            layer_cache.append((x, h[l], c[l], i, f, g, o, c_new, tanh_c))
            h[l], c[l] = h_new, c_new
            x = h_new
        logits = x @ params["wo"].T + params["bo"]
        m = logits.max(axis=1, keepdims=True)
        expz = np.exp(logits - m)
        probs = expz / expz.sum(axis=1, keepdims=True)
        logp = logits - m - np.log(expz.sum(axis=1, keepdims=True))
        loss -= logp[np.arange(B), ys[:, t]].sum()
        caches.append((layer_cache, probs, reset))
    loss /= B * T
    return loss, caches, h, c


def loss_and_grads(model: RnnModel, xs, ys, h0=None, c0=None):
    """Mean cross-entropy over a chunk and its full gradient."""
    params, config = model.params, model.config
    B, T = xs.shape
    L, H = config.layers, config.width
    if h0 is None:
        h0 = [np.zeros((B, H), dtype=config.dtype) for _ in range(L)]
        c0 = [np.zeros((B, H), dtype=config.dtype) for _ in range(L)]
    loss, caches, hT, cT = _forward_chunk(params, config, xs, ys, h0, c0)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dh_next = [np.zeros((B, H), dtype=config.dtype) for _ in range(L)]
    dc_next = [np.zeros((B, H), dtype=config.dtype) for _ in range(L)]
    scale = 1.0 / (B * T)
    for t in range(T - 1, -1, -1):
        layer_cache, probs, reset = caches[t]
        dlogits = probs.astype(config.dtype, copy=True)
        dlogits[np.arange(B), ys[:, t]] -= 1.0
        dlogits *= scale
        h_top = layer_cache[-1][6] * layer_cache[-1][8]  # o * tanh(c)
        grads["wo"] += dlogits.T @ h_top
        grads["bo"] += dlogits.sum(axis=0)
        dx = dlogits @ params["wo"]
        for l in range(L - 1, -1, -1):
            x, h_prev, c_prev, i, f, g, o, c_new, tanh_c = layer_cache[l]
            dh = dx + dh_next[l]
            do = dh * tanh_c
            dc = dh * o * (1.0 - tanh_c ** 2) + dc_next[l]
            df = dc * c_prev
            di = dc * g
            dg = dc * i
            dc_prev = dc * f
            dz = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f),
                 dg * (1.0 - g ** 2), do * o * (1.0 - o)], axis=1)
            grads[f"wx{l}"] += dz.T @ x
            grads[f"wh{l}"] += dz.T @ h_prev
            grads[f"b{l}"] += dz.sum(axis=0)
            dh_prev = dz @ params[f"wh{l}"]
            dh_prev[reset] = 0.0
            dc_prev[reset] = 0.0
            dh_next[l] = dh_prev
            dc_next[l] = dc_prev
            dx = dz @ params[f"wx{l}"]
        np.add.at(grads["emb"], xs[:, t], dx)
    return loss, grads, (hT, cT)


class _Adam:
    def __init__(self, params, config):
        self.lr = config.learning_rate
        self.b1, self.b2, self.eps = config.beta1, config.beta2, config.eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


def _training_stream(corpus):
    ids = [PAD]
    for line in corpus:
        ids.extend(byte_tokenize(line))
        ids.append(PAD)
    return np.array(ids, dtype=np.int64)


def tbptt_train(corpus, config: RnnConfig, max_steps=None):
    """Train on an iterable of lines (str or bytes).

    Returns (model, per-step loss trace).  Deterministic for a fixed
    seed and corpus order.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus must be non-empty")
    model = make_rnn(config)
    stream = _training_stream(corpus)
    if len(stream) < 2:
        raise ValueError("corpus has no scoreable bytes")

    B = max(1, min(config.batch_size, (len(stream) - 1) // config.rho, len(stream) - 1))
    S = (len(stream) - 1) // B
    xs = stream[: B * S].reshape(B, S)
    ys = stream[1: B * S + 1].reshape(B, S)

    opt = _Adam(model.params, config)
    trace = []
    L, H = config.layers, config.width
    steps = 0
    for _ in range(config.epochs):
        h = [np.zeros((B, H), dtype=config.dtype) for _ in range(L)]
        c = [np.zeros((B, H), dtype=config.dtype) for _ in range(L)]
        for off in range(0, S, config.rho):
            cx = xs[:, off: off + config.rho]
            cy = ys[:, off: off + config.rho]
            if cx.shape[1] == 0:
                break
            loss, grads, (h, c) = loss_and_grads(model, cx, cy, h, c)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at step {steps}")
            opt.update(model.params, grads)
            trace.append(float(loss))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return model, trace
    return model, trace


# --- checkpointing ---

_FORMAT = "respace-rnn-v1"


def save_rnn(model: RnnModel, destination):
    meta = {"format": _FORMAT, "config": model.config.to_dict()}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"),
                                        dtype=np.uint8)}
    arrays.update(model.params)
    if hasattr(destination, "write"):
        np.savez(destination, **arrays)
    else:
        # open ourselves so numpy cannot append ".npz" to the path
        with open(destination, "wb") as fh:
            np.savez(fh, **arrays)


def load_rnn(source) -> RnnModel:
    try:
        data = np.load(source)
    except (OSError, ValueError, zipfile.BadZipFile, io.UnsupportedOperation) as e:
        raise CheckpointError(f"unreadable checkpoint: {e}") from None
    try:
        if "__meta__" not in data:
            raise CheckpointError("not a model checkpoint (missing metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != _FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
        config = RnnConfig.from_dict(meta["config"])
        expected = _init_params(config, np.random.default_rng(0))
        params = {}
        for k, ref in expected.items():
            if k not in data:
                raise CheckpointError(f"checkpoint missing parameter {k!r}")
            arr = data[k]
            if arr.shape != ref.shape:
                raise CheckpointError(
                    f"parameter {k!r} has shape {arr.shape}, expected {ref.shape}")
            params[k] = arr
        return RnnModel(config, params)
    finally:
        if hasattr(data, "close"):
            data.close()
