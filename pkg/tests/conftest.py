import http.server
import threading
from functools import partial

import numpy as np
import pytest

from idm.data import MNIST_DIMS, MNIST_FILES, encode_idx


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fake_mnist_arrays(seed=0):
    """MNIST-shaped arrays: each image is a blob whose position encodes its digit."""
    r = np.random.default_rng(seed)
    out = {}
    for split, (images_key, labels_key) in {"train": ("train_images", "train_labels"),
                                            "test": ("test_images", "test_labels")}.items():
        n = MNIST_DIMS[labels_key][0]
        digits = r.integers(0, 10, n).astype(np.uint8)
        images = np.zeros((n, 28, 28), dtype=np.uint8)
        rows = 2 + 2 * digits
        for k in range(4):
            images[np.arange(n), rows + k % 2, 4 + k] = 200 + k
        out[images_key], out[labels_key] = images, digits
    return out


@pytest.fixture(scope="session")
def mnist_arrays():
    return fake_mnist_arrays()


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory, mnist_arrays):
    """A directory holding the four IDX files (gzipped) with MNIST dimensions."""
    root = tmp_path_factory.mktemp("mnist")
    for key, arr in mnist_arrays.items():
        (root / (MNIST_FILES[key] + ".gz")).write_bytes(encode_idx(arr, compress=True))
    return root


class _QuietHandler(http.server.SimpleHTTPRequestHandler):
    requests = []

    def log_message(self, *args):
        pass

    def do_GET(self):
        type(self).requests.append(self.path)
        super().do_GET()


@pytest.fixture
def mirror(mnist_dir):
    """Local HTTP server serving the fake MNIST directory; yields (url, request log)."""
    handler = type("Handler", (_QuietHandler,), {"requests": []})
    server = http.server.ThreadingHTTPServer(
        ("127.0.0.1", 0), partial(handler, directory=str(mnist_dir)))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}", handler.requests
    finally:
        server.shutdown()
        server.server_close()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance_report():
    def report(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
