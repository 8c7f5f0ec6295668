import pytest

from rdino.augment import AugmentPolicy
from rdino.model import EncoderConfig, HeadConfig
from rdino.trainer import TrainConfig


def tiny_config(**kw) -> TrainConfig:
    """A few-second training run: 4 speakers x 2 utterances, 1 s / 0.5 s crops, small network."""
    base = dict(
        epochs=2,
        warmup_epochs=1,
        batch_size=4,
        synth_speakers=4,
        synth_utts=2,
        synth_seconds=1.5,
        global_seconds=1.0,
        local_seconds=0.5,
        augment=AugmentPolicy(strategy="wav", rir_taps=200),
        encoder=EncoderConfig(n_mels=40, channels=(16, 16), dilations=(1, 2), attention_dim=8, embed_dim=16),
        head=HeadConfig(hidden=(32, 32), tap_dim=32, bottleneck=16, out_dim=64),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()
