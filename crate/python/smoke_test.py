"""Smoke test for the sigverify Python extension."""

import math
import tempfile
from pathlib import Path

import sigverify


def main() -> None:
    assert abs(sigverify.cosine_similarity([1, 2, 3], [4, 5, 6]) - 32 / math.sqrt(14 * 77)) < 1e-12

    eer, threshold, far, frr = sigverify.compute_eer([0.9, 0.8, 0.3, 0.1], [True, True, False, False])
    assert eer == 0.0 and far == 0.0 and frr == 0.0, (eer, threshold)
    roc = sigverify.compute_roc([0.9, 0.8, 0.3, 0.1], [True, True, False, False])
    assert roc[0][1:] == (0.0, 0.0) and roc[-1][1:] == (1.0, 1.0)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "corpus"
        n = sigverify.write_synthetic_corpus(str(root), writers=6, seed=1)
        manifest = sigverify.Manifest.build(str(root))
        assert len(manifest) == n
        assert len(manifest.users()) == 6

        train, test = manifest.split_users(3, seed=0)
        assert not set(train) & set(test)
        pairs = manifest.reference_pairs(test, stamped=True, seed=0)
        positives = sum(1 for p in pairs if p[3])
        assert positives == len(pairs) - positives

        backbone = sigverify.Backbone.build("tiny", 6, 48, 96, seed=0)
        scores = backbone.score_pairs(pairs)
        assert all(-1.0 <= s <= 1.0 for s in scores)
        eer, *_ = sigverify.compute_eer(scores, [p[3] for p in pairs])
        assert 0.0 <= eer <= 1.0

        cleaner = sigverify.Cleaner.untrained(32, 64)
        image = [[1.0 if (r + c) % 4 else 0.1 for c in range(50)] for r in range(20)]
        out = cleaner.clean(image)
        assert len(out) == 20 and len(out[0]) == 50
        assert all(0.0 <= v <= 1.0 for row in out for v in row)

        feats = backbone.extract(image)
        assert len(feats) == backbone.feature_dim

    print(f"ok: {n} images, {len(pairs)} pairs, untrained tiny EER {eer:.3f}")


if __name__ == "__main__":
    main()
