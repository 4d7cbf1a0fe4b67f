"""A small decoder-only transformer whose FFN down-projection in every block
is the blended expert layer. The base weights are frozen; adapters and routers
are the only things any training stage touches.

Parameters live in a flat ``name -> ndarray`` store. Dataclass views from the
adapter/router/composition modules wrap those arrays without copying, so the
per-vector reference operations and the batched graph read identical state.

The default frozen base ("coded" init) is a structured reservoir rather than a
Gaussian soup. Rank-r adapters can only add a rank-r linear map of the FFN
hidden state, which is far too small to *discover* sequence copying from random
features; instead the frozen base is laid out so the relevant quantities are
already linear functions of the residual stream:

- payload tokens carry a two-plane rotation code in 4 coordinates, instruction
  and EOS tokens a one-hot code, positions a rotation code plus a constant and
  an instruction-region flag;
- block 0 heads copy the previous / previous-previous token code into
  dedicated coordinates and pool the instruction code into every position;
- block 1 heads match the current token code against stored previous-token
  codes, recovering "token after the occurrence of the current token" (forward
  copy direction) and "token before it" (reverse direction).

An adapter then only has to read one 4-coordinate block and write the token
code (optionally relabeled) for the output logits, which is exactly rank 4,
and the router sees the instruction code in every FFN hidden state. The
"random" init keeps everything plain Gaussian; gradient checks and the small
property tests use it because they exercise arbitrary tiny shapes.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np

from . import autograd as ag
from .adapters import PREMERGED_ID, AdapterSet, LoraAdapter
from .composition import AtMoeLinear, RoutingReport, routing_report
from .config import Config
from .numerics import derive_rng
from .router import RouterLayerParams, build_groups, slot_mask
from .taskgen import EOS, PAYLOAD_BASE, PAYLOAD_SIZE, TASK_TOKENS

EMBED_STD = 0.1
READOUT_STD = 0.02
ROUTER_STD = 0.02

MODES = ("full", "base", "adapter")

# ---------------------------------------------------------------------------
# Coded-reservoir layout. First 32 residual coordinates:
#   0:4   payload token code (two planes, angles k and 9k times 2*pi/32)
#   4:9   control code: instruction tokens 3..7 one-hot
#   9:15  position code (two planes, angles t and 7t, triangle representation)
#   15    constant coordinate: query anchor for the instruction-pool head,
#         raised inside the instruction region (positions 1..3) so the same
#         head can pool it, and the readout direction for end-of-sequence
#   16:20 previous-token payload code   (block-0 head 0)
#   20:24 previous-previous token code  (block-0 head 1)
#   24:28 forward match read            (block-1 head 0)
#   28:32 reverse match read            (block-1 head 1)
# Plane multipliers minimize the worst off-peak autocorrelation: (1, 9) gives
# max dot 0.707 over 32 token ids, (1, 7) gives max 1.414/2 over 23 offsets.
#
# The position code stores each plane as three cosines 120 degrees apart
# ("triangle" representation) instead of cosine/sine.  Each code is then
# zero-sum by construction and the rotation operator annihilates the all-ones
# direction, so layer norm's mean subtraction cancels out of the offset-head
# scores exactly instead of contaminating near-tied attention margins.

_PC, _CC, _POSC = slice(0, 4), slice(4, 9), slice(9, 15)
_CONST = 15
_PREV1, _PREV2 = slice(16, 20), slice(20, 24)
_FWD, _REV = slice(24, 28), slice(28, 32)
_TOK_PLANES, _POS_PLANES = (1, 9), (1, 7)
_CODE_ANGLE = 2.0 * np.pi / 32.0
_TRI_OFFS = np.array([0.0, 2.0 * np.pi / 3.0, -2.0 * np.pi / 3.0])

CODE_TOK_SCALE = 3.0     # payload/control token code magnitude
CODE_POS_SCALE = 2.0     # position code magnitude
CODE_FLAG_SCALE = 3.0    # instruction-region boost on the constant coordinate
CODE_NOISE = 0.02        # symmetry-breaking noise on coded tensors
CODE_QK_OFFSET = 3.5     # query/key gain of the offset heads (prev, prev2)
CODE_QK_INSTR = 2.2      # query/key gain of the instruction-pool head
CODE_QK_MATCH = 2.6      # query/key gain of the match heads (fwd, rev)
CODE_V_PREV = 1.2        # write scale of the offset heads
CODE_V_INSTR = 1.0       # write scale of the instruction-pool head
CODE_V_MATCH = 1.5       # write scale of the match heads
CODE_READOUT = 0.75      # unembedding = CODE_READOUT * clean codes + noise
EOS_READOUT = 1.0        # unembedding gain of end-of-sequence on _CONST
FFN_PASS_GAIN = 2.0      # gain of the paired pass-through FFN rows


def _plane_code(indices: np.ndarray, planes: tuple[int, int]) -> np.ndarray:
    """Unit-amplitude two-plane rotation code, one row per index."""
    a0 = _CODE_ANGLE * planes[0] * indices
    a1 = _CODE_ANGLE * planes[1] * indices
    return np.stack([np.cos(a0), np.sin(a0), np.cos(a1), np.sin(a1)], axis=1)


def _tri_code(indices: np.ndarray, planes: tuple[int, int]) -> np.ndarray:
    """Two-plane code in the zero-sum triangle representation (6 columns).

    Plane angle a is stored as (cos(a - o) for o in _TRI_OFFS); the three
    components always sum to zero and the dot-product kernel between two
    angles is 1.5 * cos(a - b), the same cosine kernel as the plane code."""
    cols = [np.cos(_CODE_ANGLE * mult * indices - off)
            for mult in planes for off in _TRI_OFFS]
    return np.stack(cols, axis=1)


def _tri_rot_back(planes: tuple[int, int], steps: int) -> np.ndarray:
    """6x6 map sending the triangle code of index t to the code of t-steps.

    Built per plane as T R T+ where T embeds (cos a, sin a) into the triangle
    representation; T+ annihilates the all-ones direction, which makes the
    offset-head queries immune to layer norm's mean subtraction."""
    T = np.stack([np.cos(_TRI_OFFS), np.sin(_TRI_OFFS)], axis=1)
    out = np.zeros((6, 6))
    for p, mult in enumerate(planes):
        th = _CODE_ANGLE * mult * steps
        c, s = np.cos(th), np.sin(th)
        rot = np.array([[c, s], [-s, c]])
        out[3 * p: 3 * p + 3, 3 * p: 3 * p + 3] = (2.0 / 3.0) * T @ rot @ T.T
    return out


def _tri_proj() -> np.ndarray:
    """6x6 orthogonal projector onto the two triangle-code planes; used for
    offset-head keys so they too ignore the all-ones (mean) direction."""
    return _tri_rot_back(_POS_PLANES, 0)


class ToyTransformer:
    def __init__(self, cfg: Config, params: dict[str, np.ndarray] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.groups = build_groups(cfg.groups)
        self.task_adapter_ids = [e for g in self.groups for e in g.expert_ids]
        self.adapter_ids = self.task_adapter_ids + [PREMERGED_ID]
        self.params = params if params is not None else self._init_params()
        self._check_param_names()

    # ------------------------------------------------------------------ setup

    def expected_param_names(self) -> list[str]:
        m = self.cfg.model
        names = ["tok_emb", "pos_emb"]
        for i in range(m.n_layers):
            b = f"blocks.{i}"
            names += [f"{b}.ln1.gain", f"{b}.ln1.bias"]
            names += [f"{b}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
            names += [f"{b}.ln2.gain", f"{b}.ln2.bias"]
            names += [f"{b}.ffn.up_w", f"{b}.ffn.up_b", f"{b}.ffn.down_w0", f"{b}.ffn.down_b0"]
            names += [f"{b}.moe.wg", f"{b}.moe.wd"]
            for aid in self.adapter_ids:
                names += [f"{b}.moe.experts.{aid}.{p}" for p in ("A", "B", "scale")]
        names += ["final_ln.gain", "final_ln.bias", "unembed"]
        return names

    def _init_params(self) -> dict[str, np.ndarray]:
        m = self.cfg.model
        G, M = self.cfg.n_groups, self.cfg.max_group_size
        P: dict[str, np.ndarray] = {}
        coded = m.base_init == "coded"

        def draw(name: str, shape: tuple[int, ...], std: float) -> None:
            P[name] = derive_rng(self.cfg.seed, "init", name).normal(0.0, std, size=shape)

        if coded:
            P["tok_emb"] = self._coded_tok_emb()
            P["pos_emb"] = self._coded_pos_emb()
        else:
            draw("tok_emb", (m.vocab_size, m.d_model), EMBED_STD)
            draw("pos_emb", (m.max_seq_len, m.d_model), EMBED_STD)
        attn_std = 1.0 / np.sqrt(m.d_model)
        for i in range(m.n_layers):
            b = f"blocks.{i}"
            P[f"{b}.ln1.gain"] = np.ones(m.d_model)
            P[f"{b}.ln1.bias"] = np.zeros(m.d_model)
            if coded:
                wq, wk, wv, wo = self._coded_attention(lower=(i == 0))
                P[f"{b}.attn.wq"], P[f"{b}.attn.wk"] = wq, wk
                P[f"{b}.attn.wv"], P[f"{b}.attn.wo"] = wv, wo
            else:
                for w in ("wq", "wk", "wv", "wo"):
                    draw(f"{b}.attn.{w}", (m.d_model, m.d_model), attn_std)
            P[f"{b}.ln2.gain"] = np.ones(m.d_model)
            P[f"{b}.ln2.bias"] = np.zeros(m.d_model)
            if coded:
                # paired +/- pass-through rows give adapters and routers an
                # exact linear view of the readable code blocks (gelu(x) -
                # gelu(-x) = x); the remaining rows are random gelu features
                # for nonlinear cues such as end-of-sequence timing. The base
                # down-projection is zeroed so the residual code coordinates
                # stay clean and adapters own the whole FFN output.
                up_w, up_b = self._coded_ffn(f"{b}.ffn")
                P[f"{b}.ffn.up_w"], P[f"{b}.ffn.up_b"] = up_w, up_b
                P[f"{b}.ffn.down_w0"] = np.zeros((m.d_model, m.d_ff))
            else:
                draw(f"{b}.ffn.up_w", (m.d_ff, m.d_model), attn_std)
                P[f"{b}.ffn.up_b"] = np.zeros(m.d_ff)
                draw(f"{b}.ffn.down_w0", (m.d_model, m.d_ff), 1.0 / np.sqrt(m.d_ff))
            P[f"{b}.ffn.down_b0"] = np.zeros(m.d_model)
            draw(f"{b}.moe.wg", (m.d_ff, G), ROUTER_STD)
            if self.cfg.router.static_intra_group:
                draw(f"{b}.moe.wd", (G, M), ROUTER_STD)
            else:
                draw(f"{b}.moe.wd", (G, m.d_ff, M), ROUTER_STD)
            for aid in self.adapter_ids:
                draw(f"{b}.moe.experts.{aid}.A", (m.rank, m.d_ff), 0.02)
                P[f"{b}.moe.experts.{aid}.B"] = np.zeros((m.d_model, m.rank))
                P[f"{b}.moe.experts.{aid}.scale"] = np.ones(1)
        P["final_ln.gain"] = np.ones(m.d_model)
        P["final_ln.bias"] = np.zeros(m.d_model)
        if coded:
            # readout from clean codes only: non-predictable ids (BOS, SEP,
            # unused) keep near-zero columns instead of ballast noise.
            # End-of-sequence reads the constant coordinate, giving adapters a
            # writable handle on termination without a dedicated code block.
            noise = derive_rng(self.cfg.seed, "init", "unembed").normal(
                0.0, CODE_NOISE, size=(m.d_model, m.vocab_size))
            unembed = CODE_READOUT * self._clean_token_codes().T + noise
            unembed[_CONST, EOS] += EOS_READOUT
            P["unembed"] = unembed
        else:
            draw("unembed", (m.d_model, m.vocab_size), READOUT_STD)
        return P

    def _clean_token_codes(self) -> np.ndarray:
        """Noise-free token geometry: payload rotation codes in the PC block,
        instruction one-hots (scaled to equal norm) in the CC block."""
        m = self.cfg.model
        codes = np.zeros((m.vocab_size, m.d_model))
        payload = np.arange(PAYLOAD_SIZE)
        codes[PAYLOAD_BASE: PAYLOAD_BASE + PAYLOAD_SIZE, _PC] = \
            CODE_TOK_SCALE * _plane_code(payload, _TOK_PLANES)
        for slot, tok in enumerate(sorted(TASK_TOKENS.values())):
            codes[tok, _CC.start + slot] = CODE_TOK_SCALE * np.sqrt(2.0)
        return codes

    def _coded_ffn(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        """Frozen FFN up-projection for the coded base: one +gain/-gain row
        pair per readable coordinate, then random gelu features."""
        m = self.cfg.model
        rng = derive_rng(self.cfg.seed, "init", tag)
        coords = [c for s in (_PC, _CC, _POSC, _FWD, _REV)
                  for c in range(s.start, s.stop)] + [_CONST]
        up_w = np.zeros((m.d_ff, m.d_model))
        up_b = np.zeros(m.d_ff)
        for k, c in enumerate(coords):
            up_w[2 * k, c] = FFN_PASS_GAIN
            up_w[2 * k + 1, c] = -FFN_PASS_GAIN
        tail = m.d_ff - 2 * len(coords)
        up_w[2 * len(coords):] = rng.normal(
            0.0, 1.0 / np.sqrt(m.d_model), size=(tail, m.d_model))
        up_b[2 * len(coords):] = rng.normal(0.0, 0.5, size=tail)
        return up_w, up_b

    def _coded_tok_emb(self) -> np.ndarray:
        # Equal embedding norm for every token id matters: layer norm divides
        # by the per-position scale, so a low-norm token (BOS/SEP) would get
        # its position-code keys boosted and hijack the offset heads. The
        # ballast rows are renormalized exactly, not just in expectation.
        m = self.cfg.model
        codes = self._clean_token_codes()
        rng = derive_rng(self.cfg.seed, "init", "tok_emb")
        emb = codes + rng.normal(0.0, CODE_NOISE, size=codes.shape)
        target = np.sqrt(2.0) * CODE_TOK_SCALE
        uncoded = np.abs(codes).sum(axis=1) == 0.0
        ballast = rng.normal(0.0, 1.0, size=(int(uncoded.sum()), m.d_model))
        ballast *= target / np.linalg.norm(ballast, axis=1, keepdims=True)
        emb[uncoded] += ballast
        return emb

    def _coded_pos_emb(self) -> np.ndarray:
        m = self.cfg.model
        emb = derive_rng(self.cfg.seed, "init", "pos_emb").normal(
            0.0, CODE_NOISE, size=(m.max_seq_len, m.d_model))
        pos = np.arange(m.max_seq_len)
        emb[:, _POSC] += CODE_POS_SCALE * _tri_code(pos, _POS_PLANES)
        emb[:, _CONST] += CODE_POS_SCALE
        flag_hi = min(4, m.max_seq_len)
        emb[1:flag_hi, _CONST] += CODE_FLAG_SCALE
        return emb

    def _coded_attention(self, lower: bool) -> tuple[np.ndarray, ...]:
        """Hand-set heads; dh = d_model//4. Lower block: head 0 copies the
        previous token code, head 1 the previous-previous code, head 2 pools
        the instruction region. Upper blocks: head 0 reads the token after the
        occurrence of the current token, head 1 the token before it."""
        d = self.cfg.model.d_model
        dh = d // 4
        wq, wk, wv, wo = (np.zeros((d, d)) for _ in range(4))
        eye4 = np.eye(4)
        if lower:
            for head, steps, dest in ((0, 1, _PREV1), (1, 2, _PREV2)):
                r = head * dh
                wq[r: r + 6, _POSC] = CODE_QK_OFFSET * _tri_rot_back(_POS_PLANES, steps)
                wk[r: r + 6, _POSC] = CODE_QK_OFFSET * _tri_proj()
                wv[r: r + 4, _PC] = eye4
                wo[dest, r: r + 4] = CODE_V_PREV * eye4
            r = 2 * dh  # instruction pool: constant query, region-raised keys
            wq[r, _CONST] = CODE_QK_INSTR
            wk[r, _CONST] = CODE_QK_INSTR
            wv[r + 1: r + 6, _CC] = np.eye(5)
            wo[_CC, r + 1: r + 6] = CODE_V_INSTR * np.eye(5)
        else:
            for head, source, dest in ((0, _PC, _FWD), (1, _PREV2, _REV)):
                r = head * dh
                wq[r: r + 4, _PC] = CODE_QK_MATCH * eye4
                wk[r: r + 4, _PREV1] = CODE_QK_MATCH * eye4
                wv[r: r + 4, source] = eye4
                wo[dest, r: r + 4] = CODE_V_MATCH * eye4
        return wq, wk, wv, wo

    def _check_param_names(self) -> None:
        expected, have = set(self.expected_param_names()), set(self.params)
        if have != expected:
            missing, extra = sorted(expected - have), sorted(have - expected)
            raise ValueError(f"parameter store mismatch: missing={missing} extra={extra}")

    # ------------------------------------------------------------- name sets

    def adapter_param_names(self, adapter_id: str) -> list[str]:
        if adapter_id not in self.adapter_ids:
            raise KeyError(f"unknown adapter id: {adapter_id!r}")
        return [f"blocks.{i}.moe.experts.{adapter_id}.{p}"
                for i in range(self.cfg.model.n_layers) for p in ("A", "B")]

    def router_param_names(self) -> list[str]:
        return [f"blocks.{i}.moe.{p}"
                for i in range(self.cfg.model.n_layers) for p in ("wg", "wd")]

    def embedding_param_names(self) -> list[str]:
        return ["tok_emb", "pos_emb"]

    def frozen_outside(self, trainable: Iterable[str]) -> list[str]:
        return sorted(set(self.params) - set(trainable))

    def param_checksums(self, names: Iterable[str] | None = None) -> dict[str, str]:
        names = sorted(self.params) if names is None else sorted(names)
        return {n: hashlib.sha256(np.ascontiguousarray(self.params[n]).tobytes()).hexdigest()
                for n in names}

    # ----------------------------------------------------------------- views

    def adapter(self, layer: int, adapter_id: str) -> LoraAdapter:
        b = f"blocks.{layer}.moe.experts.{adapter_id}"
        return LoraAdapter(
            adapter_id=adapter_id,
            task_id=PREMERGED_ID if adapter_id == PREMERGED_ID else adapter_id,
            B=self.params[f"{b}.B"],
            A=self.params[f"{b}.A"],
            scaling=float(self.params[f"{b}.scale"][0]),
        )

    def adapter_set(self, layer: int) -> AdapterSet:
        return AdapterSet({aid: self.adapter(layer, aid) for aid in self.adapter_ids})

    def router_params(self, layer: int) -> RouterLayerParams:
        return RouterLayerParams(
            wg=self.params[f"blocks.{layer}.moe.wg"],
            wd=self.params[f"blocks.{layer}.moe.wd"],
            tau_g=self.cfg.router.tau_g,
            tau_d=self.cfg.router.tau_d,
            mask=slot_mask(self.groups, self.cfg.max_group_size),
        )

    def moe_layer(self, layer: int) -> AtMoeLinear:
        return AtMoeLinear(
            W0=self.params[f"blocks.{layer}.ffn.down_w0"],
            bias0=self.params[f"blocks.{layer}.ffn.down_b0"],
            groups=self.groups,
            experts=self.adapter_set(layer),
            router=self.router_params(layer),
            lam=self.cfg.atmoe.lam,
        )

    # ----------------------------------------------------------------- graph

    def _validate_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ValueError(f"expected a [batch, time] token array, got shape {tokens.shape}")
        if tokens.shape[1] > self.cfg.model.max_seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds "
                             f"max_seq_len {self.cfg.model.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.model.vocab_size:
            raise ValueError("token id out of vocabulary")
        return tokens

    def build_graph(self, tokens: np.ndarray, trainable: Iterable[str] = (),
                    mode: str = "full", adapter_id: str | None = None,
                    lam_override: float | None = None,
                    token_mask: np.ndarray | None = None):
        """Batched forward graph.

        Returns (logits Tensor [B*T, vocab], leaf dict, aux). ``aux`` carries
        per-layer arrays: ``moe_input`` (the activation entering the expert
        projection), plus ``x_route``/``gw_nodes`` in full mode.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "adapter" and adapter_id not in self.adapter_ids:
            raise KeyError(f"unknown adapter id: {adapter_id!r}")
        tokens = self._validate_tokens(tokens)
        B, T = tokens.shape
        m = self.cfg.model
        P = ag.parameters(self.params, trainable)
        lam = self.cfg.atmoe.lam if lam_override is None else float(lam_override)
        if token_mask is None:
            token_mask = np.ones((B, T))
        causal = np.tril(np.ones((T, T), dtype=bool))
        aux: dict = {"moe_input": [], "x_route": [], "gw_nodes": []}

        h = ag.add(ag.embedding(P["tok_emb"], tokens), ag.getitem(P["pos_emb"], slice(0, T)))
        for i in range(m.n_layers):
            b = f"blocks.{i}"
            a = ag.layer_norm(h, P[f"{b}.ln1.gain"], P[f"{b}.ln1.bias"])
            h = ag.add(h, self._attention(a, P, b, B, T, causal))
            x = ag.layer_norm(h, P[f"{b}.ln2.gain"], P[f"{b}.ln2.bias"])
            xf = ag.reshape(x, (B * T, m.d_model))
            u = ag.gelu(ag.add(ag.matmul(xf, ag.transpose(P[f"{b}.ffn.up_w"], (1, 0))),
                               P[f"{b}.ffn.up_b"]))
            aux["moe_input"].append(u.data)
            y = self._moe(u, P, i, mode, adapter_id, lam, B, T, token_mask, aux)
            h = ag.add(h, ag.reshape(y, (B, T, m.d_model)))
        hf = ag.layer_norm(h, P["final_ln.gain"], P["final_ln.bias"])
        logits = ag.matmul(ag.reshape(hf, (B * T, m.d_model)), P["unembed"])
        return logits, P, aux

    def _attention(self, a, P, b: str, B: int, T: int, causal: np.ndarray):
        m = self.cfg.model
        H, dh = m.n_heads, m.d_model // m.n_heads
        af = ag.reshape(a, (B * T, m.d_model))

        def heads(w_name):
            proj = ag.matmul(af, ag.transpose(P[w_name], (1, 0)))
            return ag.transpose(ag.reshape(proj, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(f"{b}.attn.wq"), heads(f"{b}.attn.wk"), heads(f"{b}.attn.wv")
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ag.masked_temp_softmax(scores, causal, 1.0)
        o = ag.transpose(ag.matmul(att, v), (0, 2, 1, 3))
        of = ag.matmul(ag.reshape(o, (B * T, m.d_model)),
                       ag.transpose(P[f"{b}.attn.wo"], (1, 0)))
        return ag.reshape(of, (B, T, m.d_model))

    def _lora(self, xf, P, layer: int, adapter_id: str):
        b = f"blocks.{layer}.moe.experts.{adapter_id}"
        out = ag.matmul(ag.matmul(xf, ag.transpose(P[f"{b}.A"], (1, 0))),
                        ag.transpose(P[f"{b}.B"], (1, 0)))
        scale = float(self.params[f"{b}.scale"][0])
        return out if scale == 1.0 else ag.mul(out, scale)

    def _moe(self, xf, P, layer: int, mode: str, adapter_id: str | None, lam: float,
             B: int, T: int, token_mask: np.ndarray, aux: dict):
        b = f"blocks.{layer}"
        base = ag.add(ag.matmul(xf, ag.transpose(P[f"{b}.ffn.down_w0"], (1, 0))),
                      P[f"{b}.ffn.down_b0"])
        if mode == "base":
            return base
        if mode == "adapter":
            return ag.add(base, self._lora(xf, P, layer, adapter_id))

        G, M = self.cfg.n_groups, self.cfg.max_group_size
        d_ff = self.cfg.model.d_ff
        x_route = self._pooled(xf, B, T, token_mask) if self.cfg.router.pooled else xf
        aux["x_route"].append(x_route.data)
        gw = ag.masked_temp_softmax(ag.matmul(x_route, P[f"{b}.moe.wg"]),
                                    None, self.cfg.router.tau_g)
        aux["gw_nodes"].append(gw)
        mask = slot_mask(self.groups, M)
        if self.cfg.router.static_intra_group:
            dl = ag.reshape(P[f"{b}.moe.wd"], (1, G, M))
        else:
            flat = ag.reshape(ag.transpose(P[f"{b}.moe.wd"], (1, 0, 2)), (d_ff, G * M))
            dl = ag.reshape(ag.matmul(x_route, flat), (xf.shape[0], G, M))
        iw = ag.masked_temp_softmax(dl, mask, self.cfg.router.tau_d)
        comb = ag.mul(ag.reshape(gw, (gw.shape[0], G, 1)), iw)

        routed = None
        for g, spec in enumerate(self.groups):
            for s in range(spec.size):
                w = ag.reshape(ag.getitem(comb, (slice(None), g, s)), (xf.shape[0], 1))
                contrib = ag.mul(w, self._lora(xf, P, layer, spec.expert_ids[s]))
                routed = contrib if routed is None else ag.add(routed, contrib)
        prem = self._lora(xf, P, layer, PREMERGED_ID)
        return ag.add(base, ag.add(ag.mul(routed, lam), ag.mul(prem, 1.0 - lam)))

    def _pooled(self, xf, B: int, T: int, token_mask: np.ndarray):
        d_ff = self.cfg.model.d_ff
        counts = token_mask.sum(axis=1, keepdims=True)[:, :, None]  # [B,1,1]
        x3 = ag.reshape(xf, (B, T, d_ff))
        mean = ag.mul(ag.reduce_sum(ag.mul(x3, token_mask[:, :, None]), 1, True), 1.0 / counts)
        return ag.reshape(ag.add(mean, np.zeros((B, T, 1))), (B * T, d_ff))

    # ------------------------------------------------------------- inference

    def loss_graph(self, tokens, targets, weights, trainable: Iterable[str] = (),
                   mode: str = "full", adapter_id: str | None = None,
                   lam_override: float | None = None, entropy_bonus: float = 0.0,
                   token_mask: np.ndarray | None = None):
        """Scored-position cross entropy; returns (loss Tensor, leaf dict, aux)."""
        logits, P, aux = self.build_graph(
            tokens, trainable, mode, adapter_id, lam_override, token_mask
        )
        aux["logits"] = logits.data
        loss = ag.cross_entropy(logits, np.asarray(targets).reshape(-1),
                                np.asarray(weights, dtype=np.float64).reshape(-1))
        if entropy_bonus > 0.0 and aux["gw_nodes"]:
            # reward spread-out group weights; experimental, off by default
            total = None
            for gw in aux["gw_nodes"]:
                n = gw.shape[0]
                neg_ent = ag.mul(ag.reduce_sum(ag.reduce_sum(ag.mul(gw, ag.log(gw)), 1), 0),
                                 1.0 / n)
                total = neg_ent if total is None else ag.add(total, neg_ent)
            loss = ag.add(loss, ag.mul(total, entropy_bonus / len(aux["gw_nodes"])))
        return loss, P, aux

    def forward_logits(self, tokens, mode: str = "full",
                       adapter_id: str | None = None,
                       lam_override: float | None = None) -> np.ndarray:
        """Logits [T, vocab] for one token sequence; no gradients."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ValueError("forward_logits expects a 1-D token sequence")
        logits, _, _ = self.build_graph(tokens[None, :], (), mode, adapter_id, lam_override)
        return logits.data.reshape(tokens.size, self.cfg.model.vocab_size)

    def loss(self, tokens, target_mask) -> float:
        """Mean next-token cross entropy over masked positions of one sequence."""
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(target_mask, dtype=bool)
        if mask.shape != tokens.shape:
            raise ValueError("target_mask must match the token sequence shape")
        if not mask.any():
            raise ValueError("target_mask selects no positions")
        if mask[-1]:
            raise ValueError("the final position has no next token to score")
        T = tokens.size
        targets = np.zeros((1, T), dtype=np.int64)
        weights = np.zeros((1, T))
        idx = np.nonzero(mask)[0]
        targets[0, idx] = tokens[idx + 1]
        weights[0, idx] = 1.0
        loss, _, _ = self.loss_graph(tokens[None, :], targets, weights)
        return float(loss.data)

    def layer_routing_trace(self, tokens) -> list[list[RoutingReport]]:
        """Per-layer, per-token routing reports for one token sequence."""
        tokens = np.asarray(tokens, dtype=np.int64)
        _, _, aux = self.build_graph(tokens[None, :], (), "full")
        trace = []
        for i in range(self.cfg.model.n_layers):
            layer_view = self.moe_layer(i)
            rows = aux["x_route"][i]
            trace.append([routing_report(layer_view, rows[t]) for t in range(tokens.size)])
        return trace
