# -*- coding: utf-8 -*-
"""
codec.py
--------
Prompt 組裝、助理回覆解析/輸出、loss 區段權重、think rate 統計、桌面版軌跡 tokenizer。

回覆格式 (Thinking 與第二段 Meta Actions 都可省略)：

Meta Actions:
- longitudinal
  - 0.0s-6.4s: Keep Speed

Thinking:
一段反思文字

Meta Actions:
- longitudinal
  - 0.0s-3.0s: Decelerate
  - 3.0s-6.4s: Wait

Action:
<|traj_future_start|>512 1536 2560 3584 4608 5632<|traj_future_end|>
"""

import re
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from common import DataError, HORIZON_BINS, DT, log
from metaction import MetaActionPlan, PlanError, parse_plan, render_plan
from trajgeo import Trajectory, EmptyCorpus

# ========== 1. 固定標記 ==========
META_HEADER = "Meta Actions:"
THINK_HEADER = "Thinking:"
ACTION_HEADER = "Action:"
FUTURE_START = "<|traj_future_start|>"
FUTURE_END = "<|traj_future_end|>"
HISTORY_START = "<|traj_history_start|>"
HISTORY_TOKEN = "<|traj_history|>"
HISTORY_END = "<|traj_history_end|>"
VIDEO_PLACEHOLDER = "<|vision_start|><|video_pad|>...<|vision_end|>"
TRAJ_TOKENS = 6

TASK_TRAJ_ONLY = "traj_only"
TASK_META_TRAJ = "meta_traj"


# ========== 2. 錯誤類別 ==========
class CodecError(DataError):
    pass


class MissingInitialPlan(CodecError):
    pass


class MissingAction(CodecError):
    pass


class PlanParse(CodecError):
    def __init__(self, err: PlanError, which: str = "initial"):
        self.err = err
        self.which = which
        super().__init__(f"{which} meta actions: {err}")


class TokenCountMismatch(CodecError):
    pass


class OrphanCorrection(CodecError):
    pass


class OutOfRangeCoefficient(CodecError):
    pass


class InvalidTokenId(CodecError):
    pass


class MissingRoute(CodecError):
    pass


# ========== 3. Prompt 模板 ==========
SYSTEM_PROMPT = """You are a helpful autonomous driving assistant.

You will receive videos and a history trajectory as context and the goal is to produce future trajectories that are reasonable in the driving scene, safe and consistent with the history trajectory.

The videos are captured by cameras mounted on the self-driving car, showing the driving scene over the past 2 seconds. Camera camera_front_wide_120fov shows the front of the car with a 120 degree field of view. Camera camera_front_tele_30fov shows the front of the car with a 30 degree field of view, the zoom-in view of camera_front_wide_120fov.

The history trajectory is 1.6 seconds of past motion for the self-driving car, sampled at 10 Hz, and includes x, y, z coordinates and heading (all four values are relative to the state at the current time). It is enclosed between <|traj_history_start|> and <|traj_history_end|>, and is encoded into a continuous latent representation using 1 token by the history trajectory encoder.

The future trajectory covers 6.4 seconds of predicted motion, also sampled at 10 Hz, and includes x, y, z coordinates and heading (relative to the state at the current time). The future trajectory is represented by a set of 6 discrete tokens enclosed between <|traj_future_start|> and <|traj_future_end|>. Each token is sampled from the vocabulary of the future trajectory tokenizer, which will decode the 6 tokens into a 6.4-second future trajectory.

You may receive different types of tasks given the context, including:
- Producing a future trajectory given the video and history trajectory.
- Proposing the meta actions in the driving process and generate the future trajectory according to the meta actions.
- Reflecting on the correctness of the meta actions according to the information in the scene and correcting the meta actions if necessary.

Meta actions are a set of high-level descriptions of the vehicle's behavior. Meta actions are grouped into three categories:
- **longitudinal**: ["Accelerate", "Decelerate", "Keep Speed", "Wait", "Reverse"]
- **lateral**: ["Straight", "Left Turn", "Right Turn"]
- **lane**: ["Keep Lane", "Left Lane Change", "Right Lane Change"]

The meta actions must partition the 6.4-second planning horizon (from 0.0s to 6.4s) without gaps or overlaps *within each group*. Groups are optional; omit any group not relevant to the current scene. List the meta actions in each group in bullet-point format, like the example below:

- longitudinal
  - 0.0s-0.9s: Keep Speed
  - 0.9s-6.4s: Accelerate
- lateral
  - 0.0s-6.4s: Straight
- lane
  - 0.0s-4.4s: Left Lane Change
  - 4.4s-6.4s: Keep Lane

Each time interval (in seconds) is specified as `start-end`, followed by a colon and an action within the group.

If you are tasked to propose the meta actions, you should first generate the meta actions before generating the future trajectory. If you think the first proposed meta actions are **incorrect**, generate a "Thinking:" section that briefly reflects on your meta-actions and explains the problem. Then provide a second "Meta Actions:" section with a corrected meta-action plan, and finally generate the future trajectory in the "Action:" section. If you are confident that the first meta actions are **valid**, you may skip the reflection section and go directly to the trajectory generation.

Respond appropriately based on the given input and task."""

_CONTEXT_TEMPLATE = (
    "The video for camera 1 (camera_front_wide_120fov) is: {cam1}"
    "The video for camera 6 (camera_front_tele_30fov) is: {cam6}"
    "The trajectory history is: " + HISTORY_START + HISTORY_TOKEN + HISTORY_END
)

_META_TRAJ_INSTRUCTION = """First, list the meta actions in the driving process. Then, generate a possible future trajectory. If the meta-action is unsafe or incorrect, reflect on it and provide a corrected one. Use the output format below.

Meta Actions:
[meta actions]

Thinking: (optional)
[text]

Meta Actions: (optional)
[corrected meta actions]

Action:
<|traj_future_start|>[6 tokens]<|traj_future_end|>"""

_TRAJ_ONLY_INSTRUCTION = """Generate a possible future trajectory. Use the output format below.

Action:
<|traj_future_start|>[6 tokens]<|traj_future_end|>"""


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    task: str
    route_block: Optional[str] = None
    visual_refs: Tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return self.system + "\n" + self.user


def _fmt1(v: float) -> str:
    s = f"{v:.1f}"
    return "0.0" if s == "-0.0" else s


def render_route_block(route) -> str:
    lines = ["The route is:"]
    lines += [f"({_fmt1(x)}, {_fmt1(y)})" for x, y in route.waypoints]
    return "\n".join(lines)


def render_prompt(scene, task: str = TASK_META_TRAJ, include_route: bool = False,
                  visual_refs: Tuple[str, ...] = ()) -> PromptBundle:
    """路線區塊插在歷史軌跡之後、輸出格式說明之前，讓格式說明永遠在最後"""
    if task not in (TASK_TRAJ_ONLY, TASK_META_TRAJ):
        raise CodecError(f"unknown prompt task {task!r}")
    if include_route and scene.route is None:
        raise MissingRoute(f"scene {scene.id} has no route")
    refs = tuple(visual_refs) or (VIDEO_PLACEHOLDER, VIDEO_PLACEHOLDER)
    user = _CONTEXT_TEMPLATE.format(cam1=refs[0], cam6=refs[-1])
    route_block = None
    if include_route:
        route_block = render_route_block(scene.route)
        user += "\n" + route_block + "\n"
    user += _META_TRAJ_INSTRUCTION if task == TASK_META_TRAJ else _TRAJ_ONLY_INSTRUCTION
    return PromptBundle(SYSTEM_PROMPT, user, task, route_block, tuple(visual_refs))


# ========== 4. 助理回覆 ==========
@dataclass(frozen=True)
class AssistantResponse:
    initial_plan: Optional[MetaActionPlan]
    traj_tokens: Tuple[int, ...]
    raw_text: str
    thinking: Optional[str] = None
    corrected_plan: Optional[MetaActionPlan] = None

    def __post_init__(self):
        if self.corrected_plan is not None and self.thinking is None:
            raise OrphanCorrection("corrected meta actions need a Thinking section before them")
        if len(self.traj_tokens) != TRAJ_TOKENS:
            raise TokenCountMismatch(f"expected {TRAJ_TOKENS} trajectory tokens, got {len(self.traj_tokens)}")

    @property
    def token_count(self) -> int:
        return len(self.raw_text.split())

    @property
    def final_plan(self) -> Optional[MetaActionPlan]:
        return self.corrected_plan if self.corrected_plan is not None else self.initial_plan


def render_response(initial_plan: Optional[MetaActionPlan], traj_tokens, thinking: Optional[str] = None,
                    corrected_plan: Optional[MetaActionPlan] = None) -> str:
    blocks = []
    if initial_plan is not None:
        blocks.append(f"{META_HEADER}\n{render_plan(initial_plan)}")
    if thinking is not None:
        blocks.append(f"{THINK_HEADER}\n{thinking}")
    if corrected_plan is not None:
        blocks.append(f"{META_HEADER}\n{render_plan(corrected_plan)}")
    ids = " ".join(str(int(t)) for t in traj_tokens)
    blocks.append(f"{ACTION_HEADER}\n{FUTURE_START}{ids}{FUTURE_END}")
    return "\n\n".join(blocks)


def build_response(initial_plan, traj_tokens, thinking=None, corrected_plan=None) -> AssistantResponse:
    text = render_response(initial_plan, traj_tokens, thinking, corrected_plan)
    return AssistantResponse(initial_plan, tuple(int(t) for t in traj_tokens), text, thinking, corrected_plan)


_HEADER_RE = re.compile(r"^[ \t]*(Meta Actions|Thinking|Action):[ \t]*", re.M)
_TOKENS_RE = re.compile(re.escape(FUTURE_START) + r"(.*?)" + re.escape(FUTURE_END), re.S)


def response_sections(text: str) -> List[Tuple[str, int, int, str]]:
    """[(header, 區段起點, 內容起點, 內容)]，區段起點即 header 所在行首"""
    matches = list(_HEADER_RE.finditer(text))
    out = []
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        out.append((m.group(1) + ":", m.start(), m.end(), text[m.end():end]))
    return out


def _parse_tokens(body: str) -> Tuple[int, ...]:
    m = _TOKENS_RE.search(body)
    if not m:
        raise MissingAction("Action section has no trajectory markers")
    raw = m.group(1).split()
    if len(raw) != TRAJ_TOKENS:
        raise TokenCountMismatch(f"expected {TRAJ_TOKENS} trajectory tokens, got {len(raw)}")
    try:
        return tuple(int(t) for t in raw)
    except ValueError:
        raise InvalidTokenId(f"non-integer trajectory token in {m.group(1)!r}")


def _plan(body: str, which: str) -> MetaActionPlan:
    try:
        return parse_plan(body)
    except PlanError as e:
        raise PlanParse(e, which)


def parse_response(text: str, require_plan: bool = True) -> AssistantResponse:
    sections = response_sections(text or "")
    headers = [s[0] for s in sections]
    if ACTION_HEADER not in headers:
        if require_plan and (not headers or headers[0] != META_HEADER):
            raise MissingInitialPlan("response does not start with Meta Actions")
        raise MissingAction("response has no Action section")
    action_at = headers.index(ACTION_HEADER)
    before = headers[:action_at]
    initial = thinking = corrected = None
    if not before:
        if require_plan:
            raise MissingInitialPlan("response does not start with Meta Actions")
    elif before[0] != META_HEADER:
        raise MissingInitialPlan("response does not start with Meta Actions")
    else:
        initial = _plan(sections[0][3], "initial")
        rest = before[1:]
        if rest == [META_HEADER]:
            raise OrphanCorrection("second Meta Actions block without a Thinking section")
        if rest not in ([], [THINK_HEADER], [THINK_HEADER, META_HEADER]):
            raise CodecError(f"unexpected section order: {' → '.join(headers)}")
        if rest:
            thinking = sections[1][3].strip()
        if len(rest) == 2:
            corrected = _plan(sections[2][3], "corrected")
    if action_at != len(headers) - 1:
        raise CodecError("sections found after the Action section")
    tokens = _parse_tokens(sections[action_at][3])
    return AssistantResponse(initial, tokens, text, thinking, corrected)


# ========== 5. Loss 區段 ==========
ROLE_PROMPT, ROLE_INITIAL, ROLE_THINKING, ROLE_CORRECTED, ROLE_TRAJ = (
    "prompt", "initial_meta", "thinking", "corrected_meta", "traj")
PROVENANCES = ("traj_only", "meta", "cf")


@dataclass(frozen=True)
class LossSpan:
    """prompt 區段的 start/end 以 prompt 文字計，其餘以助理回覆文字計"""
    role: str
    start: int
    end: int
    weight: float
    masked: bool

    def __post_init__(self):
        if self.weight < 0:
            raise DataError(f"loss weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class LossPolicy:
    w_act: float = 1.0
    w_meta: float = 10.0
    w_cf: float = 10.0
    mask_first_meta_on_cf: bool = True

    def __post_init__(self):
        if min(self.w_act, self.w_meta, self.w_cf) < 0:
            raise DataError("loss weights must be non-negative")

    @classmethod
    def from_config(cls, cfg: Optional[dict]) -> "LossPolicy":
        cfg = cfg or {}
        preset = cfg.get("preset") or "1:10:10"
        if preset not in LOSS_PRESETS:
            raise DataError(f"unknown loss preset {preset!r} (choose from {', '.join(LOSS_PRESETS)})")
        base = LOSS_PRESETS[preset]
        return cls(
            w_act=float(cfg["w_act"]) if cfg.get("w_act") is not None else base.w_act,
            w_meta=float(cfg["w_meta"]) if cfg.get("w_meta") is not None else base.w_meta,
            w_cf=float(cfg["w_cf"]) if cfg.get("w_cf") is not None else base.w_cf,
            mask_first_meta_on_cf=bool(cfg.get("mask_first_meta_on_cf", True)),
        )


LOSS_PRESETS = {
    "1:10:10": LossPolicy(1.0, 10.0, 10.0),
    "1:10:20": LossPolicy(1.0, 10.0, 20.0),
    "10:1:1": LossPolicy(10.0, 1.0, 1.0),
}


@dataclass(frozen=True)
class TrainingRecord:
    scene_id: str
    prompt: PromptBundle
    response: AssistantResponse
    provenance: str
    round_tag: str = ""
    loss_spans: Tuple[LossSpan, ...] = ()

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "cf" and self.response.corrected_plan is None:
            raise DataError(f"cf record {self.scene_id} has no corrected plan")
        if self.provenance == "traj_only" and self.response.initial_plan is not None:
            raise DataError(f"traj_only record {self.scene_id} carries a meta-action plan")


def assign_loss_spans(record: TrainingRecord, policy: LossPolicy = None) -> List[LossSpan]:
    policy = policy or LossPolicy()
    text = record.response.raw_text
    spans = [LossSpan(ROLE_PROMPT, 0, len(record.prompt.text), 0.0, True)]
    sections = response_sections(text)
    meta_seen = 0
    for i, (header, start, _, _) in enumerate(sections):
        # 第一段從 0 開始，最後一段到文字結尾，確保每個字元都落在某一段
        s = 0 if i == 0 else start
        e = sections[i + 1][1] if i + 1 < len(sections) else len(text)
        if header == META_HEADER:
            meta_seen += 1
            if meta_seen == 1:
                masked = record.provenance == "cf" and policy.mask_first_meta_on_cf
                spans.append(LossSpan(ROLE_INITIAL, s, e, 0.0 if masked else policy.w_meta, masked))
            else:
                spans.append(LossSpan(ROLE_CORRECTED, s, e, policy.w_meta, False))
        elif header == THINK_HEADER:
            spans.append(LossSpan(ROLE_THINKING, s, e, policy.w_cf, False))
        else:
            spans.append(LossSpan(ROLE_TRAJ, s, e, policy.w_act, False))
    return spans


# ========== 6. Think rate ==========
def think_stats(corpus) -> Tuple[float, float]:
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("think stats over an empty corpus")
    thinks = sum(1 for r in corpus if r.thinking is not None)
    return thinks / len(corpus), float(np.mean([r.token_count for r in corpus]))


def format_len_rate(mean_len: float, think_rate: float) -> str:
    """表格欄位 Output Len. (Think Rate)"""
    return f"{mean_len:.2f} ({think_rate:.3f})"


# ========== 7. 桌面版軌跡 tokenizer ==========
class DeskTokenizer:
    """
    每軸擬合過原點三次多項式 a1·t + a2·t² + a3·t³，
    6 個係數各自均勻量化成 1024 級；token id = 係數序號 × 1024 + 級數。
    """

    def __init__(self, levels: int = 1024, ranges=((-25.0, 25.0), (-5.0, 5.0), (-1.0, 1.0))):
        self.levels = int(levels)
        self.ranges = tuple(tuple(map(float, r)) for r in ranges)
        self.t = DT * np.arange(1, HORIZON_BINS + 1)
        self.design = np.stack([self.t, self.t ** 2, self.t ** 3], axis=1)

    def fit(self, traj: Trajectory) -> np.ndarray:
        """回傳 [ax1, ax2, ax3, ay1, ay2, ay3]"""
        coef, *_ = np.linalg.lstsq(self.design, traj.xy, rcond=None)
        return np.concatenate([coef[:, 0], coef[:, 1]])

    def _slot_range(self, slot: int):
        lo, hi = self.ranges[slot % 3]
        return lo, (hi - lo) / self.levels

    def quantize(self, coefs) -> Tuple[List[int], bool]:
        tokens, clamped = [], False
        for slot, a in enumerate(coefs):
            lo, step = self._slot_range(slot)
            hi = self.ranges[slot % 3][1]
            a = float(a)
            # [lo, hi] 兩端都算範圍內，最上面半格併入最高階
            clamped = clamped or a < lo or a > hi
            level = min(max(int(round((a - lo) / step)), 0), self.levels - 1)
            tokens.append(slot * self.levels + level)
        return tokens, clamped

    def dequantize(self, tokens) -> np.ndarray:
        tokens = list(tokens)
        if len(tokens) != TRAJ_TOKENS:
            raise TokenCountMismatch(f"expected {TRAJ_TOKENS} trajectory tokens, got {len(tokens)}")
        coefs = np.zeros(TRAJ_TOKENS)
        for slot, tok in enumerate(tokens):
            level = int(tok) - slot * self.levels
            if not 0 <= level < self.levels:
                raise InvalidTokenId(f"token {tok} is not a valid id for coefficient slot {slot}")
            lo, step = self._slot_range(slot)
            coefs[slot] = lo + level * step
        return coefs

    def tokenize(self, traj: Trajectory, strict: bool = False) -> List[int]:
        coefs = self.fit(traj)
        tokens, clamped = self.quantize(coefs)
        if clamped:
            if strict:
                raise OutOfRangeCoefficient(f"coefficients {np.round(coefs, 3).tolist()} exceed the tokenizer ranges")
            log(f"⚠️ 軌跡係數超出量化範圍，已截斷：{np.round(coefs, 3).tolist()}")
        return tokens

    def detokenize(self, tokens) -> Trajectory:
        c = self.dequantize(tokens)
        ax, ay = c[:3], c[3:]
        x, y = self.design @ ax, self.design @ ay
        dx = ax[0] + 2 * ax[1] * self.t + 3 * ax[2] * self.t ** 2
        dy = ay[0] + 2 * ay[1] * self.t + 3 * ay[2] * self.t ** 2
        speed = np.hypot(dx, dy)
        heading = np.where(speed > 1e-6, np.arctan2(dy, dx), 0.0)
        poses = np.stack([x, y, np.zeros_like(x), heading], axis=1)
        return Trajectory(poses)


DEFAULT_TOKENIZER = DeskTokenizer()


def tokenize_traj(traj: Trajectory, strict: bool = False) -> List[int]:
    return DEFAULT_TOKENIZER.tokenize(traj, strict)


def detokenize_traj(tokens) -> Trajectory:
    return DEFAULT_TOKENIZER.detokenize(tokens)
