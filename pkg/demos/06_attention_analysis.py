"""Attention heatmaps and per-lead head similarity.

The heatmap pools one encoder layer's attention heads and applies the
pooled weights to the 12-lead input, showing which time segments the
model mixes into each token.  The per-lead variant runs one independent
encoder per lead, so each attention head can be scored against the
pooled representation with cosine similarity.
"""

import tempfile
from pathlib import Path

import numpy as np

from ecgfusion.analysis import (
    attention_heatmap,
    export_heatmap,
    head_pool_similarity,
    per_lead_head_summary,
)
from ecgfusion.data import prepare_records, synth_dataset
from ecgfusion.model import EcgTransformer, ModelConfig

ds = synth_dataset(n_per_class=1, seed=6)
record = prepare_records(ds)[0]

model = EcgTransformer(
    ModelConfig(d_model=24, n_heads=4, n_encoder_layers=2, n_decoder_layers=1,
                dropout=0.0, feedforward_dim=96),
    seed=6,
)
heatmap = attention_heatmap(model, record, layer_index=0)
print(f"heatmap for {record.record_id}: shape {heatmap.values.shape}, "
      f"range [{heatmap.values.min():.3f}, {heatmap.values.max():.3f}]")

out = Path(tempfile.mkdtemp(prefix="ecgfusion_heatmap_"))
export_heatmap(heatmap, out / "layer0")
print(f"wrote {out / 'layer0.csv'} and {out / 'layer0.pgm'} (P5, 250x12)")

# per-lead encoders: one attention head per lead
per_lead = EcgTransformer(
    ModelConfig(d_model=24, n_heads=12, n_encoder_layers=1, n_decoder_layers=1,
                dropout=0.0, feedforward_dim=96, per_lead_encoders=True),
    seed=6,
)
cache = {}
per_lead.forward(record, cache=cache)
vectors, pooled = per_lead_head_summary(cache, per_lead.config.d_model)
sims = head_pool_similarity(vectors, pooled)
print("\ncosine similarity of each lead's head against the pooled representation:")
for lead, sim in enumerate(sims):
    bar = "#" * int(round(20 * abs(sim)))
    print(f"  lead {lead:2d}: {sim:+.3f} {bar}")
print("(higher magnitude = more of that lead's features survive the pooling)")
