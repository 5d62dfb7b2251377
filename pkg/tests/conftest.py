import numpy as np
import pytest

from app.models import Architecture, DatasetSpec, ExperimentConfig, ModelConfig, TrainingSpec
from app.synthdata import Vocabulary, make_dataset
from app.toyvlm import ToyVLM


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Two layers, two heads, a 4x4 visual grid"""
    return ModelConfig(layers=2, heads=2, width=16, vocab_size=16, image_side=16, patch_size=4,
                       max_seq_len=40, max_answer_len=16, seed=3)


@pytest.fixture(params=[a.value for a in Architecture])
def arch_config(request, tiny_config) -> ModelConfig:
    return tiny_config.model_copy(update={"arch": Architecture(request.param)})


@pytest.fixture
def vocab() -> Vocabulary:
    return Vocabulary()


@pytest.fixture
def samples(tiny_config, vocab):
    spec = DatasetSpec(n_train=4, n_eval=3, seed=7)
    return make_dataset(spec, tiny_config, vocab, "train")


@pytest.fixture
def model(tiny_config) -> ToyVLM:
    return ToyVLM(tiny_config)


@pytest.fixture
def trace(model, samples):
    sample = samples[0]
    return model.teacher_force(sample.image, sample.prompt_ids, sample.answer_ids)


@pytest.fixture
def random_image(tiny_config) -> np.ndarray:
    rng = np.random.default_rng(11)
    return rng.random((tiny_config.image_side, tiny_config.image_side, 3))


@pytest.fixture
def experiment_config(tiny_config) -> ExperimentConfig:
    return ExperimentConfig(
        seed=5,
        model=tiny_config,
        dataset=DatasetSpec(n_train=4, n_eval=3, seed=5),
        training=TrainingSpec(epochs=1, batch_size=2),
        methods=["raw_attention"],
        metrics=["epg"],
    )
