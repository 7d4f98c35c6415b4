"""The synthetic paired corpus: how speech frames, transcriptions, and
translations are generated, and what the alignment oracle knows.

Run:  python demos/02_synthetic_corpus.py
"""

import numpy as np

from stlab.data import (CorpusConfig, alignment_shrink_ratio,
                        compress_alignment, content_permutation,
                        expected_frame_count, generate_sample, make_batch)

config = CorpusConfig(seed=7)
print(f"vocabulary: {config.vocab_size} content tokens, blank=0, "
      f"pad={config.pad_id}, bos={config.bos_id}")

perm = content_permutation(config)
print("translation table (content ids):",
      {int(i): int(perm[i]) for i in range(1, 6)}, "...")

frames, src, tgt, alignment = generate_sample(config, sample_seed=42)
print(f"\nsample 42: src={src.tolist()} -> tgt={tgt.tolist()}")
print(f"speech: {frames.shape[0]} frames of dim {frames.shape[1]} "
      f"(expected {expected_frame_count(config, len(src)):.1f} for this length)")
print(f"alignment: {alignment.tolist()}  (-1 marks inserted blank frames)")
print(f"run-length compressed path: {compress_alignment(alignment, src).tolist()}")
print(f"oracle shrink ratio: {alignment_shrink_ratio(alignment):.3f}")

batch = make_batch(config, np.arange(100))
ratios = [alignment_shrink_ratio(a) for a in batch.alignments]
print(f"\nover 100 samples: mean frames {batch.speech_lens.mean():.1f}, "
      f"mean oracle ratio {np.mean(ratios):.3f}")
