"""Energy-based fine-tuning of autoregressive policies by feature matching."""
from .data import Corpus, MarkovSource, generate_synthetic, load_corpus, split
from .ebm import ebm_tilt_oracle
from .features import FeatureMapSpec, embed, one_hot_features, snapshot_feature_network
from .metrics import ce_eval, cfm_loss, fm_profile
from .policy import (TabularPolicy, TransformerPolicy, Vocab, grad_log_prob, load_checkpoint, log_prob,
                     next_token_dist, sample_completions, save_checkpoint)
from .rewards import fm_rewards, reinforce_gradient, rloo_baselines
from .rollouts import build_mask, parallel_sample, plan_strides
from .trainer import TrainConfig, ce_gradient, ebft_step, published_defaults, run_training, sft_baseline_step
from .whitening import fit_whitener, whiten, whitened_rewards

__version__ = "0.1.0"
