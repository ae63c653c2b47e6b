"""Shared-encoder network with three heads and its joint training loop.

Architecture (28x28 single-channel input):

    encoder   conv 128@3x3 > conv 64@3x3 > maxpool 2x2 > conv 32@3x3
              > maxpool 2x2, relu after each conv; feature map 32x7x7,
              flattened embedding width 1568
    ocn head  dense 1024 + relu + dropout > dense m > per-class sigmoid
              (1-vs-rest, deliberately not softmax: outputs are
              independent probabilities and need not sum to 1)
    pcn head  concat of two embeddings > dense 512 + relu + dropout
              > dense 256 + relu + dropout > dense 1 > sigmoid
    decoder   conv 32@3x3 > upsample 2x2 > conv 64@3x3 > upsample 2x2
              > conv 128@3x3 > conv 1@3x3 > sigmoid, from the 32x7x7 map,
              reconstructing the 28x28 input

Both pair branches apply the one shared encoder; dropout only follows
dense layers.  Training sums the three losses into one optimizer step;
the backward passes run head by head so peak memory stays bounded
(gradients accumulate, so the update is identical to one combined pass).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .losses import LossBreakdown, ae_loss, ocn_loss, pcn_loss
from .optim import Adam
from .tensor import ShapeError, Tensor

IMAGE_SIZE = 28
EMBED_DIM = 32 * 7 * 7
CHECKPOINT_MAGIC = b"OWJM1\n"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    pairs_per_class: int = 10000
    dropout_rate: float = 0.25
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    ae_loss_squared: bool = False
    pcn_pairs_per_step: int | None = None  # defaults to batch_size
    ae_per_step: int | None = None  # defaults to batch_size
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def as_image_batch(images) -> np.ndarray:
    """Normalize to [n, 1, 28, 28]; accepts [n, 28, 28] as well."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(
            f"expected image batch [n, 1, {IMAGE_SIZE}, {IMAGE_SIZE}], got {arr.shape}"
        )
    return arr


def nhwc_batch(images, dtype=np.float32) -> np.ndarray:
    """Image batch in the model's internal channels-last layout [n,28,28,1]."""
    return np.ascontiguousarray(
        as_image_batch(images).transpose(0, 2, 3, 1).astype(dtype, copy=False)
    )


class JointModel:
    """Parameters plus forward passes for the encoder and its three heads."""

    def __init__(self, m_seen, seed=0, dtype=np.float32):
        if m_seen < 1:
            raise ValueError("need at least one seen class")
        self.m_seen = m_seen
        self.dtype = np.dtype(dtype)
        self.embed_dim = EMBED_DIM
        rng = np.random.default_rng(seed)
        p = {}

        def conv(name, f, c, sigmoid_out=False):
            fan_in, fan_out = c * 9, f * 9
            init = _glorot_uniform(rng, (f, c, 3, 3), fan_in, fan_out, self.dtype) \
                if sigmoid_out else _he_uniform(rng, (f, c, 3, 3), fan_in, self.dtype)
            p[f"{name}.w"] = Tensor(init, requires_grad=True, name=f"{name}.w")
            p[f"{name}.b"] = Tensor(np.zeros(f, self.dtype), requires_grad=True, name=f"{name}.b")

        def fc(name, d, k, sigmoid_out=False):
            init = _glorot_uniform(rng, (d, k), d, k, self.dtype) \
                if sigmoid_out else _he_uniform(rng, (d, k), d, self.dtype)
            p[f"{name}.w"] = Tensor(init, requires_grad=True, name=f"{name}.w")
            p[f"{name}.b"] = Tensor(np.zeros(k, self.dtype), requires_grad=True, name=f"{name}.b")

        conv("enc.conv1", 128, 1)
        conv("enc.conv2", 64, 128)
        conv("enc.conv3", 32, 64)
        fc("ocn.fc1", EMBED_DIM, 1024)
        fc("ocn.out", 1024, m_seen, sigmoid_out=True)
        fc("pcn.fc1", 2 * EMBED_DIM, 512)
        fc("pcn.fc2", 512, 256)
        fc("pcn.out", 256, 1, sigmoid_out=True)
        conv("dec.conv1", 32, 32)
        conv("dec.conv2", 64, 32)
        conv("dec.conv3", 128, 64)
        conv("dec.conv4", 1, 128, sigmoid_out=True)
        self.params = p

    # -- graph-building passes (training and gradient checks) -------------

    def _conv(self, x, name):
        return T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                        channels_last=True)

    def encoder_pass(self, x: Tensor):
        """x is channels-last [N, 28, 28, 1]; see nhwc_batch."""
        h = T.relu(self._conv(x, "enc.conv1"))
        h = T.relu(self._conv(h, "enc.conv2"))
        h = T.max_pool2d(h, channels_last=True)
        h = T.relu(self._conv(h, "enc.conv3"))
        fmap = T.max_pool2d(h, channels_last=True)
        flat = fmap.reshape((fmap.shape[0], EMBED_DIM))
        return flat, fmap

    def ocn_pass(self, flat: Tensor, training=False, rng=None, dropout_rate=0.25):
        h = T.relu(T.dense(flat, self.params["ocn.fc1.w"], self.params["ocn.fc1.b"]))
        h = T.dropout(h, dropout_rate, training, rng)
        return T.sigmoid(T.dense(h, self.params["ocn.out.w"], self.params["ocn.out.b"]))

    def pcn_pass(self, flat_p: Tensor, flat_q: Tensor, training=False, rng=None,
                 dropout_rate=0.25):
        z = T.concat([flat_p, flat_q], axis=1)
        h = T.relu(T.dense(z, self.params["pcn.fc1.w"], self.params["pcn.fc1.b"]))
        h = T.dropout(h, dropout_rate, training, rng)
        h = T.relu(T.dense(h, self.params["pcn.fc2.w"], self.params["pcn.fc2.b"]))
        h = T.dropout(h, dropout_rate, training, rng)
        out = T.sigmoid(T.dense(h, self.params["pcn.out.w"], self.params["pcn.out.b"]))
        return out.reshape((out.shape[0],))

    def decoder_pass(self, fmap: Tensor):
        h = T.relu(self._conv(fmap, "dec.conv1"))
        h = T.upsample2d(h, channels_last=True)
        h = T.relu(self._conv(h, "dec.conv2"))
        h = T.upsample2d(h, channels_last=True)
        h = T.relu(self._conv(h, "dec.conv3"))
        return T.sigmoid(self._conv(h, "dec.conv4"))

    # -- inference helpers (no graph, chunked) -----------------------------

    def _batches(self, images, chunk):
        arr = nhwc_batch(images, self.dtype)
        for i in range(0, len(arr), chunk):
            yield arr[i : i + chunk]

    def encode(self, images, chunk=256) -> np.ndarray:
        """Deterministic flattened embeddings, [n, 1568]."""
        out = []
        with T.no_grad():
            for x in self._batches(images, chunk):
                out.append(self.encoder_pass(Tensor(x))[0].data)
        return np.concatenate(out) if out else np.zeros((0, EMBED_DIM), self.dtype)

    def ocn_probs(self, images, chunk=256) -> np.ndarray:
        """Per-class 1-vs-rest probabilities, [n, m]; rows need not sum to 1."""
        out = []
        with T.no_grad():
            for x in self._batches(images, chunk):
                flat, _ = self.encoder_pass(Tensor(x))
                out.append(self.ocn_pass(flat).data)
        return np.concatenate(out) if out else np.zeros((0, self.m_seen), self.dtype)

    def pcn_prob(self, left_images, right_images, chunk=256) -> np.ndarray:
        """Same-class probability for each (left, right) pair, [n].

        Order matters: the branches concatenate left-then-right, so
        pcn_prob(a, b) and pcn_prob(b, a) may differ.  Symmetrize downstream
        when a metric is needed.
        """
        left = nhwc_batch(left_images, self.dtype)
        right = nhwc_batch(right_images, self.dtype)
        if len(left) != len(right):
            raise ShapeError(f"pair batches disagree: {len(left)} vs {len(right)}")
        out = []
        with T.no_grad():
            for i in range(0, len(left), chunk):
                fl, _ = self.encoder_pass(Tensor(left[i : i + chunk]))
                fr, _ = self.encoder_pass(Tensor(right[i : i + chunk]))
                out.append(self.pcn_pass(fl, fr).data)
        return np.concatenate(out) if out else np.zeros(0, self.dtype)

    def pcn_prob_embedded(self, flat_left: np.ndarray, flat_right: np.ndarray,
                          chunk=8192) -> np.ndarray:
        """pcn_prob on precomputed embeddings; avoids re-encoding when many
        pairs reuse few images (distance matrices)."""
        out = []
        with T.no_grad():
            for i in range(0, len(flat_left), chunk):
                out.append(
                    self.pcn_pass(Tensor(flat_left[i : i + chunk]),
                                  Tensor(flat_right[i : i + chunk])).data
                )
        return np.concatenate(out) if out else np.zeros(0, self.dtype)

    def reconstruct(self, images, chunk=256) -> np.ndarray:
        out = []
        with T.no_grad():
            for x in self._batches(images, chunk):
                _, fmap = self.encoder_pass(Tensor(x))
                out.append(self.decoder_pass(fmap).data.transpose(0, 3, 1, 2))
        return np.concatenate(out) if out else np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE), self.dtype)


# ------------------------------------------------------------------ train


class _CyclicSampler:
    """Endless shuffled index stream; reshuffles on every wrap."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n) if n else np.zeros(0, np.int64)
        self.pos = 0

    def take(self, count):
        if self.n == 0 or count == 0:
            return np.zeros(0, np.int64)
        out = []
        while count > 0:
            avail = self.n - self.pos
            grab = min(avail, count)
            out.append(self.order[self.pos : self.pos + grab])
            self.pos += grab
            count -= grab
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
        return np.concatenate(out)


def train_joint(model: JointModel, config: TrainConfig, images: np.ndarray,
                ocn_idx, ocn_class_idx, pair_left, pair_right, pair_label,
                ae_idx) -> list[LossBreakdown]:
    """Jointly minimize the summed three-head loss with Adam.

    ``images`` holds every training image; the index arrays select the
    classifier stream (with dense class indices 0..m-1), the pair stream and
    the reconstruction stream.  Pair or reconstruction streams may be empty,
    which reduces training to the remaining heads.  Returns one per-epoch
    loss breakdown (mean per step).
    """
    images = nhwc_batch(images, model.dtype)
    ocn_idx = np.asarray(ocn_idx, dtype=np.int64)
    ocn_class_idx = np.asarray(ocn_class_idx, dtype=np.int64)
    pair_left = np.asarray(pair_left, dtype=np.int64)
    pair_right = np.asarray(pair_right, dtype=np.int64)
    pair_label = np.asarray(pair_label, dtype=np.int64)
    ae_idx = np.asarray(ae_idx, dtype=np.int64)
    if len(ocn_idx) == 0:
        raise ValueError("classifier stream is empty")

    rng = np.random.default_rng(config.seed)
    adam = Adam(model.params, lr=config.learning_rate, beta1=config.beta1,
                beta2=config.beta2, eps=config.epsilon)
    n_pcn = config.pcn_pairs_per_step if config.pcn_pairs_per_step is not None else config.batch_size
    n_ae = config.ae_per_step if config.ae_per_step is not None else config.batch_size
    pair_stream = _CyclicSampler(len(pair_left), rng)
    ae_stream = _CyclicSampler(len(ae_idx), rng)
    steps_per_epoch = (len(ocn_idx) + config.batch_size - 1) // config.batch_size

    history = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(ocn_idx))
        sums = np.zeros(3)
        for s in range(steps_per_epoch):
            step += 1
            batch = order[s * config.batch_size : (s + 1) * config.batch_size]

            x = Tensor(images[ocn_idx[batch]])
            flat, _ = model.encoder_pass(x)
            probs = model.ocn_pass(flat, training=True, rng=rng,
                                   dropout_rate=config.dropout_rate)
            loss = ocn_loss(probs, ocn_class_idx[batch])
            l_ocn = loss.item()
            loss.backward()

            l_pcn = 0.0
            if len(pair_left):
                take = pair_stream.take(n_pcn)
                fl, _ = model.encoder_pass(Tensor(images[pair_left[take]]))
                fr, _ = model.encoder_pass(Tensor(images[pair_right[take]]))
                pp = model.pcn_pass(fl, fr, training=True, rng=rng,
                                    dropout_rate=config.dropout_rate)
                loss = pcn_loss(pp, pair_label[take])
                l_pcn = loss.item()
                loss.backward()

            l_ae = 0.0
            if len(ae_idx):
                take = ae_stream.take(n_ae)
                xa = Tensor(images[ae_idx[take]])
                _, fmap = model.encoder_pass(xa)
                xhat = model.decoder_pass(fmap)
                loss = ae_loss(xa, xhat, squared=config.ae_loss_squared)
                l_ae = loss.item()
                loss.backward()

            if not np.isfinite([l_ocn, l_pcn, l_ae]).all():
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} "
                    f"(ocn={l_ocn}, pcn={l_pcn}, ae={l_ae})"
                )
            sums += (l_ocn, l_pcn, l_ae)
            adam.step()
            adam.zero_grad()
        mean = sums / steps_per_epoch
        history.append(LossBreakdown.combine(mean[0], mean[1], mean[2]))
    return history


# ------------------------------------------------------------- checkpoint


def save_checkpoint(model: JointModel, config: TrainConfig, path):
    """Versioned binary container: named shapes in a JSON header, then the
    raw little-endian float32 payload in header order."""
    names = sorted(model.params)
    header = {
        "format_version": 1,
        "m_seen": model.m_seen,
        "config": asdict(config),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(model.params[n].data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[JointModel, TrainConfig]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        if header.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        config = TrainConfig(**header["config"])
        model = JointModel(header["m_seen"], seed=config.seed)
        recorded = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
        if set(recorded) != set(model.params):
            missing = sorted(set(model.params) - set(recorded))
            extra = sorted(set(recorded) - set(model.params))
            raise ValueError(f"checkpoint tensor names disagree: missing {missing}, extra {extra}")
        for name in sorted(recorded):
            shape = recorded[name]
            expect = model.params[name].shape
            if shape != expect:
                raise ValueError(
                    f"checkpoint shape mismatch for parameter '{name}': "
                    f"stored {shape}, model needs {expect}"
                )
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            if len(raw) < 4 * count:
                raise ValueError(f"checkpoint truncated while reading '{name}'")
            model.params[name].data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(model.dtype)
            model.params[name].grad = np.zeros_like(model.params[name].data)
    return model, config
