"""Smoke test for the emostyle Python bindings.

Build first:  pip install --no-build-isolation ./crates/py
(needs maturin), or copy target/release/libemostyle_py.so to emostyle_py.so on PYTHONPATH.
"""

import os
import sys
import tempfile

import emostyle_py as es


def main() -> int:
    assert es.emotions()[0] == "amusement" and len(es.emotions()) == 8

    k, dist = es.quantize([0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]])
    assert (k, dist) == (0, 1.0), (k, dist)

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        n, iou = es.generate_dataset(data, n=80, seed=3)
        assert n == 80 and iou >= 0.5
        content = os.path.join(data, "content", sorted(os.listdir(os.path.join(data, "content")))[0])
        assert es.edge_iou(content, content) == 1.0
        assert abs(es.ssim(content, content) - 1.0) < 1e-12
        assert len(es.encode_style(content)) == 64

        s1 = os.path.join(tmp, "s1.ckpt")
        losses = es.train(1, data, s1, epochs=2)
        assert len(losses) == 2
        s2 = os.path.join(tmp, "s2.ckpt")
        es.train(2, data, s2, resume=s1, epochs=1)

        model = es.Model.load(s2)
        assert len(model.dictionary("fear")) == 8
        out = os.path.join(tmp, "out.png")
        model.stylize("fear", out, content=content, steps=4, seed=1)
        model.stylize("awe", out, prompt="Dog", steps=4, seed=1)
        assert os.path.getsize(out) > 0
        try:
            model.stylize("joy", out, content=content)
        except ValueError as e:
            assert "sadness" in str(e)
        else:
            raise AssertionError("unknown emotion accepted")

    print("python smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
