from .heads import CATEGORIES, HeadReport, Thresholds, categorize_heads, score_heads
from .lens import (HeadProbes, LensResult, TranslatorSet, attentionlens_probes, discriminability,
                   head_projection, headlens_all, headlens_decode, logit_lens, train_translators)
from .patching import (ALL_TOKENS, HeadSet, OverwriteCurve, head_means, jaccard, mean_ablation_importance,
                       top_k, vap_headwise, vap_layerwise)
from .probes import (ProbeResult, binding_probe, image_features, numerosity_probe, patch_instance_labels)
from .yesband import YesBand, band_curve, band_stats, yes_band
