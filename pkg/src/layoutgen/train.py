"""Training loop: shuffle elements, flatten, corrupt at a uniform timestep,
score the reverse step, and take an optimizer step."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Layout, element_tokens
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionSchedule, corrupt, training_loss
from .errors import DataError, NumericError
from .nn import AdamW
from .vocab import Vocabulary


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.0
    batch_size: int = 64
    steps: int = 2000
    lambda_aux: float = 0.1
    seed: int = 0
    shuffle_elements: bool = True
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.lr <= 0:
            raise DataError("OUT_OF_RANGE", "learning rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Denoiser
    trace: list = field(default_factory=list)  # (step, loss, vb, aux) rows
    ema_loss: float = float("nan")
    steps: int = 0


def tokenize_layouts(layouts, vocab: Vocabulary):
    """Per-layout (E, 5) token matrices; quantization happens once."""
    out = []
    for lay in layouts:
        toks = np.zeros((len(lay), 5), dtype=np.int64)
        for i, e in enumerate(lay.elements):
            toks[i] = element_tokens(e, vocab)
        out.append(toks)
    return out


def assemble_batch(tokenized, idxs, vocab: Vocabulary, max_elements: int,
                   rng: np.random.Generator, shuffle: bool) -> np.ndarray:
    batch = np.full((len(idxs), 5 * max_elements), vocab.pad_id, dtype=np.int64)
    for row, i in enumerate(idxs):
        toks = tokenized[i]
        if shuffle and len(toks) > 1:
            toks = toks[rng.permutation(len(toks))]
        batch[row, :5 * len(toks)] = toks.reshape(-1)
    return batch


def train(layouts, vocab: Vocabulary, sched: DiffusionSchedule,
          dconfig: DenoiserConfig, tconfig: TrainConfig,
          log_cb=None) -> TrainResult:
    """Train a denoiser; fully reproducible from the configs' seed."""
    if not layouts:
        raise DataError("EMPTY_DATA", "training needs a non-empty dataset")
    for lay in layouts:
        if len(lay) > dconfig.max_elements:
            raise DataError("TOO_MANY_ELEMENTS", "layout exceeds the model's capacity")

    root = np.random.SeedSequence(tconfig.seed)
    init_rng, order_rng, noise_rng, drop_rng = \
        (np.random.default_rng(s) for s in root.spawn(4))

    model = Denoiser(dconfig, vocab, init_rng)
    opt = AdamW([p for _, p in model.named_params()], lr=tconfig.lr,
                betas=(tconfig.beta1, tconfig.beta2),
                weight_decay=tconfig.weight_decay)
    tokenized = tokenize_layouts(layouts, vocab)

    n = len(tokenized)
    order = order_rng.permutation(n)
    cursor = 0
    result = TrainResult(model)
    ema = None
    for step in range(1, tconfig.steps + 1):
        idxs = []
        while len(idxs) < tconfig.batch_size:
            if cursor == n:
                order = order_rng.permutation(n)
                cursor = 0
            take = min(n - cursor, tconfig.batch_size - len(idxs))
            idxs.extend(order[cursor:cursor + take])
            cursor += take
        z0 = assemble_batch(tokenized, idxs, vocab, dconfig.max_elements,
                            order_rng, tconfig.shuffle_elements)
        t = noise_rng.integers(1, sched.timesteps + 1, size=len(idxs))
        zt = corrupt(z0, t, sched, vocab, noise_rng)
        logits = model.forward(zt, t, train=True, rng=drop_rng)
        try:
            loss, (vb, aux), grad = training_loss(
                logits, z0, zt, t, sched, vocab,
                aux_weight=tconfig.lambda_aux, with_grad=True)
        except NumericError as e:
            raise NumericError("NONFINITE_LOSS",
                               f"{e.message} at step {step}") from e
        model.zero_grad()
        model.backward(grad.astype(logits.dtype))
        opt.step()

        ema = loss if ema is None else \
            tconfig.ema_decay * ema + (1 - tconfig.ema_decay) * loss
        result.trace.append((step, float(loss), float(vb), float(aux)))
        if log_cb is not None:
            log_cb(step, loss, vb, aux)
    result.ema_loss = float(ema)
    result.steps = tconfig.steps
    return result
