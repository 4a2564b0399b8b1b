"""Encoder / classifier / discriminator networks and their checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import BatchNormState, Parameter, Tensor, batch_norm, no_grad, ops

VARIANTS = ("dann_sup", "dann_unsup", "wass_sup", "wass_unsup", "plain")
LEAKY_SLOPE = 0.2


@dataclass
class EncoderConfig:
    input_dim: int
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    use_batchnorm: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("encoder needs at least one layer, all widths positive")

    @property
    def latent_dim(self) -> int:
        return self.hidden[-1]


@dataclass
class ClassifierConfig:
    num_classes: int
    latent_dim: int = 256
    hidden: tuple[int, ...] = (128, 64)
    use_batchnorm: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass
class DiscriminatorConfig:
    latent_dim: int = 256
    hidden: tuple[int, ...] = (256, 128, 64)
    mode: str = "dann"
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mode not in ("dann", "wasserstein"):
            raise ValueError(f"unknown discriminator mode {self.mode!r}")


class Dense:
    """Fully connected layer, optionally followed by batch norm and an activation."""

    def __init__(self, prefix, fan_in, fan_out, rng, activation="relu", batchnorm=False, slope=0.2):
        gain = 2.0 if activation == "relu" else 2.0 / (1.0 + slope**2)
        limit = np.sqrt(3.0 * gain / fan_in)
        self.W = Parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), f"{prefix}.W")
        self.b = Parameter(np.zeros(fan_out), f"{prefix}.b")
        self.activation = activation
        self.slope = slope
        self.bn = None
        if batchnorm:
            self.gamma = Parameter(np.ones(fan_out), f"{prefix}.gamma")
            self.beta = Parameter(np.zeros(fan_out), f"{prefix}.beta")
            self.bn = BatchNormState(fan_out)

    def parameters(self) -> list[Parameter]:
        ps = [self.W, self.b]
        if self.bn is not None:
            ps += [self.gamma, self.beta]
        return ps

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        prefix = self.W.name[: -len(".W")]
        return {
            f"{prefix}.running_mean": self.bn.running_mean,
            f"{prefix}.running_var": self.bn.running_var,
        }

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ops.affine(x, self.W, self.b)
        if self.bn is not None:
            h = batch_norm(h, self.gamma, self.beta, self.bn, training)
        if self.activation == "relu":
            h = ops.relu(h)
        elif self.activation == "leaky_relu":
            h = ops.leaky_relu(h, self.slope)
        return h


class MLP:
    def __init__(self, name: str, layers: list[Dense]):
        self.name = name
        self.layers = layers

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer(x, training)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]


@dataclass
class AdaptationModel:
    """The (encoder, classifier, discriminator) triple plus its variant tag."""

    encoder: MLP
    classifier: MLP
    discriminator: MLP
    variant: str
    configs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def __setattr__(self, name, value):
        if name == "variant" and "variant" in self.__dict__:
            raise AttributeError("variant is fixed at construction")
        super().__setattr__(name, value)

    @property
    def input_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim

    def named_parameters(self) -> dict[str, Parameter]:
        nets = (self.encoder, self.classifier, self.discriminator)
        return {p.name: p for net in nets for p in net.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for net in (self.encoder, self.classifier, self.discriminator):
            out.update(net.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.named_parameters(), self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing keys: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data[...] = state[k]
        for k, b in bufs.items():
            b[...] = state[k]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def _build_mlp(name, dims, rng, hidden_activation, batchnorm, slope=LEAKY_SLOPE):
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        layers.append(
            Dense(
                f"{name}.layer{i}",
                fan_in,
                fan_out,
                rng,
                activation=None if last else hidden_activation,
                batchnorm=batchnorm and not last,
                slope=slope,
            )
        )
    return MLP(name, layers)


def build_model(
    enc: EncoderConfig,
    cls: ClassifierConfig,
    dis: DiscriminatorConfig | None = None,
    seed: int = 0,
    variant: str = "dann_sup",
) -> AdaptationModel:
    """Initialise all three networks deterministically from ``seed``.

    Weights are He-uniform (LeakyReLU-adjusted for the discriminator), biases
    zero, batch-norm scale one and shift zero.
    """
    if dis is None:
        mode = "wasserstein" if variant.startswith("wass") else "dann"
        dis = DiscriminatorConfig(latent_dim=enc.latent_dim, mode=mode)
    if cls.latent_dim != enc.latent_dim or dis.latent_dim != enc.latent_dim:
        raise ValueError(
            f"latent dims disagree: encoder {enc.latent_dim}, classifier {cls.latent_dim}, "
            f"discriminator {dis.latent_dim}"
        )
    rng = np.random.default_rng(seed)
    # every encoder layer is a hidden block (affine -> BN -> ReLU), including the last
    enc_layers = []
    dims = (enc.input_dim,) + enc.hidden
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        enc_layers.append(Dense(f"encoder.layer{i}", fi, fo, rng, "relu", enc.use_batchnorm))
    encoder = MLP("encoder", enc_layers)
    classifier = _build_mlp(
        "classifier", (cls.latent_dim,) + cls.hidden + (cls.num_classes,), rng, "relu", cls.use_batchnorm
    )
    discriminator = _build_mlp(
        "discriminator", (dis.latent_dim,) + dis.hidden + (1,), rng, "leaky_relu", False, dis.slope
    )
    configs = {"encoder": asdict(enc), "classifier": asdict(cls), "discriminator": asdict(dis), "seed": seed}
    return AdaptationModel(encoder, classifier, discriminator, variant, configs)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def encode(model: AdaptationModel, x, training: bool = False) -> Tensor:
    x = _as_input(x)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected input with {model.input_dim} features, got shape {x.shape}")
    return model.encoder(x, training)


def classify(model: AdaptationModel, z: Tensor, training: bool = False) -> Tensor:
    if z.shape[-1] != model.classifier.in_dim:
        raise ValueError(f"latent width {z.shape[-1]} != classifier input {model.classifier.in_dim}")
    return model.classifier(z, training)


def discriminate(model: AdaptationModel, z: Tensor) -> Tensor:
    """Raw (unsquashed) domain score per row; the discriminator has no batch norm."""
    if z.shape[-1] != model.discriminator.in_dim:
        raise ValueError(f"latent width {z.shape[-1]} != discriminator input {model.discriminator.in_dim}")
    return model.discriminator(z, False)


def embed(model: AdaptationModel, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Eval-mode latents as a plain array."""
    X = np.asarray(X, dtype=np.float64)
    with no_grad():
        parts = [encode(model, X[i : i + chunk]).data for i in range(0, len(X), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, model.encoder.out_dim))


def predict_logits(model: AdaptationModel, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    with no_grad():
        parts = [classify(model, encode(model, X[i : i + chunk])).data for i in range(0, len(X), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, model.num_classes))


def predict(model: AdaptationModel, X: np.ndarray) -> np.ndarray:
    return predict_logits(model, X).argmax(axis=1)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: AdaptationModel, path) -> Path:
    """Write an ``.npz`` archive: one float64 array per named key plus ``__meta__``.

    ``__meta__`` is a UTF-8 JSON document (stored as a uint8 array) holding the
    variant tag and the three network configs.
    """
    path = Path(path)
    meta = json.dumps({"variant": model.variant, "configs": model.configs}, sort_keys=True)
    arrays = model.state_dict()
    arrays["__meta__"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> AdaptationModel:
    with np.load(Path(path)) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        state = {k: archive[k] for k in archive.files if k != "__meta__"}
    cfg = meta["configs"]
    model = build_model(
        EncoderConfig(**cfg["encoder"]),
        ClassifierConfig(**cfg["classifier"]),
        DiscriminatorConfig(**cfg["discriminator"]),
        seed=cfg.get("seed", 0),
        variant=meta["variant"],
    )
    model.load_state_dict(state)
    return model
