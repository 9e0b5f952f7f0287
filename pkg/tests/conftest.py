import numpy as np
from hypothesis import HealthCheck, settings

np.seterr(all="raise", under="ignore")

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=10, deadline=None)
settings.load_profile("default")


TINY_SPEC = dict(
    n_docs=10,
    head_vocab=5,
    modifier_vocab=3,
    filler_vocab=5,
    lexicon_size=10,
    sentences_per_doc=(1, 3),
    slots_per_sentence=(2, 4),
)
TINY_DIMS = dict(embed_dim=4, encoder_hidden=4, mlp_hidden=6, refine_hidden=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
