"""Slow reference implementations used as independent oracles."""
import numpy as np

from .ops import conv_output_size


class MacCounter:
    """Tallies multiply-accumulates performed by :func:`conv2d_naive`."""

    def __init__(self):
        self.macs = 0


def conv2d_naive(x, w, stride=1, pad=0, counter=None):
    """Direct six-nested-loop cross-correlation (no im2col, no BLAS)."""
    b_n, c_n, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    out = np.zeros((b_n, cout, ho, wo), dtype=np.result_type(x, w))
    macs = 0
    for b in range(b_n):
        for o in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(c_n):
                        for ky in range(k):
                            for kx in range(k):
                                iy = oy * stride + ky - pad
                                ix = ox * stride + kx - pad
                                v = x[b, c, iy, ix] if 0 <= iy < h and 0 <= ix < wd else 0.0
                                acc += v * w[o, c, ky, kx]
                                macs += 1
                    out[b, o, oy, ox] = acc
    if counter is not None:
        counter.macs += macs
    return out


def count_macs_naive(model, batch=1):
    """MACs of one forward pass, counted by running every conv through :func:`conv2d_naive`.

    Only tensor shapes matter, so the input is zeros. Returns MACs per image.
    """
    from .network import BasicBlock

    counter = MacCounter()
    x = np.zeros((batch, *model.spec.input_shape))

    def run(layer, inp):
        return conv2d_naive(inp, layer.filters.astype(np.float64), layer.stride, layer.pad, counter)

    for unit in model.units:
        if isinstance(unit, BasicBlock):
            out = run(unit.conv2, run(unit.conv1, x))
            if unit.shortcut is not None:
                run(unit.shortcut, x)
            x = out
        else:
            x = run(unit, x)
    return counter.macs // batch
