"""How redundant are tile features? Clustering error, local similarity, relevance mass.

Run: python demos/redundancy_walkthrough.py
"""

import numpy as np

from slidecompress.redundancy import aggregate, compression_curve, local_redundancy, relevance_curve
from slidecompress.slide_io import synthesize_corpus

corpus = synthesize_corpus(8, grid=(24, 24), n_clusters=4, dim=32, seed=0)
print(f"{len(corpus)} slides, {corpus[0].n_tiles} tiles in the first")

# K-means reconstruction error; the elbow sits near the number of tissue clusters
curves = [compression_curve(s, ks=(1, 2, 4, 8, 16, 32, 64)) for s in corpus]
stats = aggregate(curves)
for k, m in zip(stats.abscissa, stats.median):
    print(f"  K={int(k):3d}  median nMSE {m:.3f}")
print("elbows:", [c.elbow_k for c in curves])

# share of grid neighbours above each cosine threshold
rep = local_redundancy(corpus[0], thresholds=np.array([0.5, 0.7, 0.9]), k_nn=8)
for t, r in zip(rep.thresholds, rep.neighbor_fraction):
    print(f"  cos >= {t:.2f}: {100 * r:.1f}% of neighbours")

# relevance mass held by the tiles most similar to the question embedding
rel = relevance_curve(corpus[0])
for p in (0.05, 0.1, 0.25, 0.5):
    print(f"  top {int(100 * p)}% of tiles carry {100 * float(rel.at(p)):.1f}% of relevance mass")
