import numpy as np
import pytest

from viewforge.core import save_image, seeded_rng
from viewforge.metrics import EmbeddingSpace


class StubSpace(EmbeddingSpace):
    """Embedding space with hand-set vectors, keyed by image bytes / text."""

    name = "stub"

    def __init__(self, images=None, texts=None, dim=4):
        self.images = dict(images or {})
        self.texts = dict(texts or {})
        self.dim = dim
        self.text_queries = []

    @staticmethod
    def image_key(image):
        return np.ascontiguousarray(np.asarray(image, dtype=np.float64)).tobytes()

    def add_image(self, image, vec):
        self.images[self.image_key(image)] = np.asarray(vec, dtype=np.float64)

    def add_text(self, text, vec):
        self.texts[text] = np.asarray(vec, dtype=np.float64)

    def embed_image(self, image):
        return self.images[self.image_key(image)]

    def embed_text(self, text):
        self.text_queries.append(text)
        return self.texts[text]


class RandomStubSpace(EmbeddingSpace):
    """Deterministic random unit vectors per input, for range/property tests."""

    name = "random-stub"
    dim = 16

    def embed_image(self, image):
        arr = np.ascontiguousarray(np.asarray(image, dtype=np.float64))
        import hashlib
        label = hashlib.sha256(arr.tobytes()).hexdigest()
        v = seeded_rng(0, f"stub-img:{label}").standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_text(self, text):
        v = seeded_rng(0, f"stub-txt:{text}").standard_normal(self.dim)
        return v / np.linalg.norm(v)


@pytest.fixture
def stub_space():
    return StubSpace


@pytest.fixture
def random_space():
    return RandomStubSpace()


def make_dataset(root, n=2, size=80, with_captions=True, seed=3):
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        sid = f"scene{chr(ord('a') + i)}"
        img = seeded_rng(seed, f"dataset:{sid}").random((size, size, 3))
        save_image(img, root / sid / "input.png")
        if with_captions:
            (root / sid / "caption.txt").write_text(
                f"a colorful test pattern {sid}\n", encoding="utf-8")
        ids.append(sid)
    return ids


@pytest.fixture
def tiny_dataset(tmp_path):
    root = tmp_path / "data"
    ids = make_dataset(root, n=2)
    return root, ids


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = {}
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid and "::" in nodeid:
                results[nodeid.split("::")[-1]] = status.upper()
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(results):
            terminalreporter.write_line(f"{name}: {results[name]}")
