import pytest

from dynfusion.branches import SemanticBranchConfig, TFBranchConfig, TimeBranchConfig
from dynfusion.data import SynthConfig, Tokenizer, generate_synthetic
from dynfusion.fusion import ModelConfig
from dynfusion.gradcheck import tiny_model_config

# 0.2 s clips give 9 log-mel frames, one more than three poolings need
SMALL_SECONDS = 0.2


def small_model_config(tokenizer: Tokenizer) -> ModelConfig:
    """Toy widths sized for 128-bin log-mel input and the corpus vocabulary."""
    tiny = tiny_model_config()
    return ModelConfig(
        time=TimeBranchConfig(**{**tiny.time.__dict__}),
        tf=TFBranchConfig(n_bins=128, channels=(2, 3, 4), bilstm_hidden=3, d_embed=4),
        semantic=SemanticBranchConfig(vocab_size=tokenizer.vocab_size, d_model=8, n_layers=1, ffn=12,
                                      heads=2, max_seq_len=256, d_embed=4),
    )


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic(SynthConfig(n_subjects=12, seconds=SMALL_SECONDS, seed=3), root)
    return root, manifest


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
