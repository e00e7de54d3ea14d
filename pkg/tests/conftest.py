import numpy as np
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance criterion -> result line, filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def rel_err(a, b) -> float:
    """Norm-wise relative error, safe when both sides vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def small_setup(seed=0, n_refs=1, frames=2, size=8, text=True, src=False, dri=False):
    """A tiny composed input: ``frames`` x size x size video, 16 audio samples per frame."""
    from synav.caption import Anchor, StructuredCaption, build_vocab, tokenize, EMPTY_TOKENS
    from synav.conditioning import ConditionBundle, compose
    from synav.latent_codec import Codec, RawAudio, RawVideo, reference
    from synav.syn_rope import RopeConfig

    codec = Codec()
    rng = np.random.default_rng(seed)
    z_v = codec.encode(RawVideo(rng.uniform(-1, 1, (frames, size, size))))
    z_a = codec.encode(RawAudio(rng.uniform(-1, 1, 16 * frames)))
    ids = [codec.encode(RawVideo(rng.uniform(-1, 1, (1, 4, 8))), reference(k)) for k in range(1, n_refs + 1)]
    tims = [codec.encode(RawAudio(rng.uniform(-1, 1, 8)), reference(k)) for k in range(1, n_refs + 1)]
    anchors = tuple(Anchor(f"sub_{k}", "red") for k in range(1, n_refs + 1))
    cap = StructuredCaption(anchors, " ".join(f"<sub_{k}> speaks" for k in range(1, n_refs + 1)), "hello", "")
    bundle = ConditionBundle(ids, [] if dri else tims,
                             codec.encode(RawVideo(rng.uniform(-1, 1, (frames, size, size)))) if src else None,
                             codec.encode(RawAudio(rng.uniform(-1, 1, 16 * frames))) if dri else None, cap)
    composed = compose(z_v, z_a, bundle, RopeConfig())
    tokens = tokenize(cap, build_vocab(["speaks", "hello", "red"])) if text else EMPTY_TOKENS
    return composed, tokens, bundle, z_v, z_a
