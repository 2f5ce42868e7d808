"""Model assembly: one parameter store spanning the correspondence, flow
and segmentation modules, plus checkpoint save/load.

Checkpoints carry, besides the parameters, the block specs (as numeric
vectors under __arch__ entries) and the scalar config, so inference can
rebuild the exact network without the training configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corr, flow, nn, seg
from . import tensor as T

ARCH_PREFIX = "__arch__/"
CONFIG_PREFIX = "__config__/"


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 128
    width_scale: float = 0.25
    seed: int = 0


class Model:
    def __init__(self, config: ModelConfig, store: nn.ParamStore,
                 corr_specs, flow_specs, seg_specs):
        self.config = config
        self.store = store
        self.corr = corr_specs
        self.flow = flow_specs
        self.seg = seg_specs

    @classmethod
    def init(cls, config: ModelConfig) -> "Model":
        store = nn.ParamStore()
        rng = np.random.default_rng(config.seed)
        corr_specs = corr.build_specs(config.n_points, config.width_scale)
        flow_specs = flow.build_specs(config.n_points, config.width_scale)
        seg_specs = seg.build_specs(config.n_points, config.width_scale)
        corr.init_params(store, corr_specs, rng)
        flow.init_params(store, flow_specs, rng)
        seg.init_params(store, seg_specs, rng)
        return cls(config, store, corr_specs, flow_specs, seg_specs)

    # -- persistence -------------------------------------------------------

    def _all_specs(self):
        return [self.corr.feat, self.corr.mask, self.flow.pair_c, self.flow.pair_pp,
                self.seg.hyp, self.seg.support, self.seg.rpen_c, self.seg.rpen_pp,
                self.seg.s_head, self.seg.r_head]

    def save(self, path):
        entries = {name: p.data for name, p in self.store.items()}
        for spec in self._all_specs():
            variant, vec = nn.spec_to_vector(spec)
            entries[f"{ARCH_PREFIX}{spec.name}:{variant}"] = vec
        entries[f"{ARCH_PREFIX}corr/conf:mlp"] = np.array(
            [len(self.corr.conf_widths), *self.corr.conf_widths], dtype=np.float32)
        entries[f"{CONFIG_PREFIX}n_points"] = np.float32(self.config.n_points)
        entries[f"{CONFIG_PREFIX}width_scale"] = np.float32(self.config.width_scale)
        entries[f"{CONFIG_PREFIX}seed"] = np.float32(self.config.seed)
        T.save_checkpoint(path, entries)

    @classmethod
    def load(cls, path) -> "Model":
        entries = T.load_checkpoint(path)
        specs = {}
        conf_widths = None
        config_vals = {}
        store = nn.ParamStore()
        for name, arr in entries.items():
            if name.startswith(ARCH_PREFIX):
                block, variant = name[len(ARCH_PREFIX):].rsplit(":", 1)
                if variant == "mlp":
                    conf_widths = tuple(int(v) for v in arr[1:1 + int(arr[0])])
                else:
                    specs[block] = nn.spec_from_vector(block, variant, arr)
            elif name.startswith(CONFIG_PREFIX):
                config_vals[name[len(CONFIG_PREFIX):]] = float(arr)
            else:
                store[name] = T.Tensor(arr, requires_grad=True, name=name)
        config = ModelConfig(n_points=int(config_vals["n_points"]),
                             width_scale=config_vals["width_scale"],
                             seed=int(config_vals["seed"]))
        feat = specs["corr/feat"]
        corr_specs = corr.CorrSpecs(
            feat=feat, conf_widths=conf_widths, mask=specs["corr/mask"],
            feature_dim=feat.stages[-1].widths[-1])
        flow_specs = flow.FlowSpecs(pair_c=specs["flow/pair_c"],
                                    pair_pp=specs["flow/pair_pp"])
        seg_specs = seg.SegSpecs(
            hyp=specs["seg/hyp"], support=specs["seg/support"],
            rpen_c=specs["seg/rpen_c"], rpen_pp=specs["seg/rpen_pp"],
            s_head=specs["seg/s_head"], r_head=specs["seg/r_head"])
        return cls(config, store, corr_specs, flow_specs, seg_specs)

    # -- forward passes ------------------------------------------------------

    def features(self, pc, fps_seed=0):
        return corr.extract_features(self.store, self.corr, pc, fps_seed=fps_seed)

    def propose(self, feat_p, feat_q):
        return corr.propose(self.store, self.corr, feat_p, feat_q)

    def predict_flow(self, refined, disp, positions_p):
        return flow.flow_forward(self.store, self.flow, refined, disp, positions_p)

    def flow_pass(self, p_cloud, q_cloud):
        """Correspondence + flow forward for a cloud pair."""
        feat_p = self.features(p_cloud)
        feat_q = self.features(q_cloud)
        match, mask, refined = self.propose(feat_p, feat_q)
        disp = flow.displacement_matrix(p_cloud.positions, q_cloud.positions)
        field = flow.flow_forward(self.store, self.flow, refined.values, disp,
                                  p_cloud.positions)
        return {"match": match, "mask": mask, "refined": refined,
                "disp": disp, "flow": field}

    def seg_pass(self, positions, flow_field, mode="inference", n_true_parts=None):
        """Hypotheses, support, and the recurrent unroll."""
        hyp = seg.generate_hypotheses(self.store, self.seg, positions, flow_field)
        support = seg.predict_support(self.store, self.seg, hyp, positions, flow_field)
        outputs = seg.rpen_unroll(self.store, self.seg, support, mode,
                                  n_true_parts=n_true_parts)
        return {"hyp": hyp, "support": support, "outputs": outputs}

    def trainable(self, prefixes=None):
        """Parameter subset whose name starts with any of the prefixes."""
        if prefixes is None:
            return dict(self.store)
        return {k: v for k, v in self.store.items()
                if any(k.startswith(p) for p in prefixes)}
