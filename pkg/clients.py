# -*- coding: utf-8 -*-
"""
clients.py
----------
受訓 policy 與標註老師模型的介面：

1. MockPolicy / StubTeacher：純本機、給定 (request, seed) 完全決定性，測試與桌面跑流程用
2. HttpPolicyClient / HttpTeacherClient：打外部服務 (requests)，有限重試 + 指數退避
3. validate_reasoning：反思文字的硬規則檢查 (字數、單段、禁用詞)
"""

import os
import re
import time
import threading
from dataclasses import dataclass
from typing import Optional, Tuple, NamedTuple

import requests

from common import ServiceError, DataError, log, rng_for, sig6
from metaction import (
    MetaActionPlan, PlanError, parse_plan, render_plan, diff_plans, ABSENT, GROUPS,
)
from codec import render_response, parse_response, tokenize_traj, CodecError
from scenelab import perturb_plan, decode_plan_to_traj

MODE_FREE, MODE_PREFILLED = "free", "prefilled"
THINK_MODES = ("adaptive", "force_think", "force_no_think")


# ========== 1. 錯誤類別 ==========
class ClientError(ServiceError):
    pass


class Transport(ClientError):
    pass


class Timeout(ClientError):
    pass


class Malformed(ClientError):
    pass


class Empty(ClientError):
    pass


# ========== 2. 請求型別 ==========
@dataclass(frozen=True)
class PolicyRequest:
    scene_id: str
    mode: str
    history: Tuple[Tuple[float, ...], ...] = ()
    include_route: bool = False
    prefilled_plan: Optional[MetaActionPlan] = None
    temperature: float = 0.8
    seed: int = 0
    think_mode: str = "adaptive"
    visual_refs: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in (MODE_FREE, MODE_PREFILLED):
            raise DataError(f"unknown policy mode {self.mode!r}")
        if self.mode == MODE_PREFILLED and self.prefilled_plan is None:
            raise DataError(f"prefilled request for {self.scene_id} has no plan")
        if not self.temperature > 0:
            raise DataError("temperature must be > 0")
        if self.think_mode not in THINK_MODES:
            raise DataError(f"unknown think mode {self.think_mode!r}")

    @property
    def idempotency_key(self) -> str:
        return f"{self.scene_id}:{self.mode}:{self.seed}"

    def to_payload(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "mode": self.mode,
            "history": [sig6(list(p)) for p in self.history],
            "include_route": self.include_route,
            "prefilled_plan": render_plan(self.prefilled_plan) if self.prefilled_plan is not None else None,
            "temperature": self.temperature,
            "seed": self.seed,
            "think_mode": self.think_mode,
            "visual_refs": list(self.visual_refs),
        }


@dataclass(frozen=True)
class TeacherRequest:
    scene_id: str
    predicted_text: str
    expert_text: str
    visual_refs: Tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("predicted_text", "expert_text"):
            try:
                parse_plan(getattr(self, name))
            except PlanError as e:
                raise DataError(f"teacher request {self.scene_id}: {name} does not parse ({e})")

    @property
    def predicted_plan(self) -> MetaActionPlan:
        return parse_plan(self.predicted_text)

    @property
    def expert_plan(self) -> MetaActionPlan:
        return parse_plan(self.expert_text)

    @property
    def prompt(self) -> Tuple[str, str]:
        return TEACHER_SYSTEM_PROMPT, render_teacher_prompt(self)


# ========== 3. 老師模型 prompt ==========
TEACHER_SYSTEM_PROMPT = (
    "You are an autonomous-driving labeling assistant. Your job is to **diagnose and correct** prediction "
    "errors **using visual cues** in the provided frames/videos. You **must not use** or reveal any privileged "
    "knowledge beyond what is visually observable. Be concrete, timestamped, and concise."
)

_TEACHER_USER_TEMPLATE = """You will be presented with a driving scenario where you need to choose the correct meta-actions. Your task is to analyze the situation and provide reasoning about why the previous meta-actions are less preferable to the expert meta-actions.

## Observation

You will receive: the PREDICTED meta-actions (longitudinal, lateral, lane) with time intervals as well as the EXPERT meta-actions. Meta-actions are a set of high-level descriptions of the vehicle's behavior. Meta-actions are grouped into three categories with these options in each category:

- **longitudinal**: ["Accelerate", "Decelerate", "Keep Speed", "Wait", "Reverse"]
- **lateral**: ["Straight", "Left Turn", "Right Turn"]
- **lane**: ["Keep Lane", "Left Lane Change", "Right Lane Change"]

The meta-actions must partition the 6.4-second planning horizon (from 0.0s to 6.4s). Groups are optional - omit any group not relevant to the current scene. The meta-actions are in bullet-point format. Each time interval (in seconds) is specified as `start-end`, followed by a colon and an action within the group. Like the example below (note that this example is not related to the scene you are watching):

- longitudinal
  - 0.0s-0.9s: Keep Speed
  - 0.9s-6.4s: Accelerate
- lateral
  - 0.0s-6.4s: Straight
- lane
  - 0.0s-4.4s: Left Lane Change
  - 4.4s-6.4s: Keep Lane

You will receive: VIDEOS/FRAMES from two cameras. The images are captured by cameras mounted on the self-driving car, showing the driving scene at this moment. Camera `camera_front_wide_120fov` shows the front of the car with a 120 degree field of view. Camera `camera_front_tele_30fov` shows the front of the car with a 30 degree field of view, the zoom-in view of `camera_front_wide_120fov`.

## Task

Your task is to provide a detailed counterfactual reasoning trace as an internal self-reflection that demonstrates your reasoning process for the current situation. Your reasoning should:

1. Start with analyzing the driving scenario and the goal. Highlight any relevant visual clues, constraints, or consequences from the scenario. For example, the lane markings, the traffic lights, the vehicles, the pedestrians, the road conditions, etc.
2. Discuss the predicted meta-actions, explain why they may be less optimal, think about the expected consequences. If the predicted meta-actions are already close to the expert meta-actions, it's OK to simply acknowledge that the meta-actions are already good and explain why.
3. Justify why the expert action may be more preferable, while not indicating you have access to the expert action. State the possible changes to the predicted meta-actions to make it closer to the expert action.


Hard rules:

- **Never mention** ground truth, labels, "expert", "GT", "dataset", or phrases implying access to future or privileged information. The ground truth meta-actions are only used to help you understand the scene and the predicted meta-actions. Do not discuss the ground truth meta-actions in the reasoning to avoid information leakage. The ultimate goal is to insert the reasoning after the predicted meta-actions and before the GT meta-actions so I can build the dataset that have 1) wrong meta-actions, 2) the reflection, and 3) the corrected meta-actions. Therefore, it's strictly forbidden to imply that you have access to the ground truth meta-actions in the reasoning. Do not discuss anything like "according to the images", "the trajectory suggests" or "the GT meta-actions suggest", "the vehicles seem like [some future actions]", etc.
- **Anchor** every claimed correction with one or more specific cues. Always ground your decisions based on the provided images. Discuss the reasoning in the context according to the given images. Do not simply say "which meta action is wrong and I should change it to something".
- Use **one short paragraph** for `reasoning` ( ≤ 80 words, no line breaks). Your reasoning should be concise and to the point. Do not list the final (correct) meta-actions. Do not use markdown or other formatting in the reasoning. Avoid meta-commentary about being an AI. Use natural, step-by-step reasoning. Focus on logical decision-making. Directly write the self-reflection reasoning, no extra headings, disclaimers, or external notes.
- If uncertain or the predicted meta-actions are similar to the ground truth meta-actions, you can simplify the reasoning.
- It's OK to find that the predicted meta-actions are already close to the expert meta-actions, and you don't need to change too much.

## Scenario Data
The video captured by camera_front_wide_120fov: {cam1}

The video captured by camera_front_tele_30fov: {cam6}

The expert meta-actions are:
{expert}

The predicted meta actions are:
{predicted}

Please propose counterfactual reasoning on the predicted meta-actions."""

_VIDEO = "<|vision_start|><|video_pad|>...<|vision_end|>"


def render_teacher_prompt(req: TeacherRequest) -> str:
    refs = tuple(req.visual_refs) or (_VIDEO, _VIDEO)
    return _TEACHER_USER_TEMPLATE.format(
        cam1=refs[0], cam6=refs[-1], expert=req.expert_text.strip(), predicted=req.predicted_text.strip())


# ========== 4. 反思文字驗證 ==========
DEFAULT_FORBIDDEN = ("ground truth", "expert", "GT", "dataset", "label",
                     "according to the images", "the trajectory suggests")


@dataclass(frozen=True)
class ReasoningConstraints:
    max_words: int = 80
    single_paragraph: bool = True
    forbidden: Tuple[str, ...] = DEFAULT_FORBIDDEN


class Verdict(NamedTuple):
    accepted: bool
    reason: str = ""

    def __bool__(self):
        return self.accepted


def _phrase_pattern(phrase: str) -> re.Pattern:
    """子字串比對 (不分大小寫)，空白與連字號視為相同；全大寫縮寫 (GT) 要整詞才算，避免誤中 length"""
    body = r"[\s\-]+".join(re.escape(w) for w in phrase.split())
    if phrase.isupper():
        body = r"(?<![A-Za-z0-9])" + body + r"(?![A-Za-z0-9])"
    return re.compile(body, re.I)


def validate_reasoning(text: str, constraints: ReasoningConstraints = None) -> Verdict:
    c = constraints or ReasoningConstraints()
    if text is None or not text.strip():
        return Verdict(False, "empty")
    if c.single_paragraph and ("\n" in text or "\r" in text):
        return Verdict(False, "line break")
    words = len(text.split())
    if words > c.max_words:
        return Verdict(False, f"too long ({words} words > {c.max_words})")
    for phrase in c.forbidden:
        if _phrase_pattern(phrase).search(text):
            return Verdict(False, f'forbidden: "{phrase}"')
    return Verdict(True)


# ========== 5. Policy 端 ==========
class PolicyClient:
    """call(req) → 助理回覆原文；實作需可被多執行緒共用"""
    name = "base"

    def call(self, req: PolicyRequest) -> str:
        raise NotImplementedError


def mock_policy(scene, mode: str, strength: float, seed: int, prefilled_plan: Optional[MetaActionPlan] = None,
                noise: float = 0.0) -> str:
    """沒有反思能力的基礎 policy：free 模式擾動真值計畫，prefilled 模式直接解碼給定計畫"""
    if mode == MODE_FREE:
        plan = perturb_plan(scene.gt_plan, seed, strength)
    else:
        plan = prefilled_plan
    traj = decode_plan_to_traj(plan, scene.history, seed, noise)
    return render_response(plan, tokenize_traj(traj))


class MockPolicy(PolicyClient):
    name = "mock"

    def __init__(self, scenes, strength: float = 0.3, noise: float = 0.0):
        self.scenes = {s.id: s for s in scenes} if not isinstance(scenes, dict) else dict(scenes)
        self.strength = float(strength)
        self.noise = float(noise)

    def call(self, req: PolicyRequest) -> str:
        scene = self.scenes.get(req.scene_id)
        if scene is None:
            raise Malformed(f"mock policy has no scene {req.scene_id}")
        # force_think 對沒有反思能力的模型無效，force_no_think 本來就成立
        return mock_policy(scene, req.mode, self.strength, req.seed, req.prefilled_plan, self.noise)


_thread_local = threading.local()


def _session() -> requests.Session:
    if getattr(_thread_local, "session", None) is None:
        _thread_local.session = requests.Session()
    return _thread_local.session


class _HttpBase:
    """共用的 POST + 重試；同時在飛的請求數由 semaphore 限制"""

    def __init__(self, endpoint: str, api_key_env: str = "", timeout: float = 60, retries: int = 3,
                 backoff: float = 1.0, max_in_flight: int = 4, label: str = "service"):
        if not endpoint:
            raise DataError(f"{label} endpoint is not configured")
        self.endpoint = endpoint
        self.api_key = os.getenv(api_key_env, "") if api_key_env else ""
        self.timeout = float(timeout)
        self.retries = max(int(retries), 1)
        self.backoff = float(backoff)
        self.label = label
        self._gate = threading.BoundedSemaphore(max(int(max_in_flight), 1))

    def _headers(self, extra: Optional[dict] = None) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        headers.update(extra or {})
        return headers

    def _post(self, payload: dict, extra_headers: Optional[dict] = None, validate=None):
        last: Optional[ClientError] = None
        for attempt in range(self.retries):
            try:
                with self._gate:
                    r = _session().post(self.endpoint, json=payload, headers=self._headers(extra_headers),
                                        timeout=self.timeout)
            except requests.exceptions.Timeout:
                last = Timeout(f"{self.label} timed out after {self.timeout:.0f}s")
            except requests.exceptions.RequestException as e:
                last = Transport(f"{self.label} transport error: {e}")
            else:
                if 400 <= r.status_code < 500 and r.status_code != 429:
                    # 4xx 重送也不會好
                    raise Transport(f"{self.label} HTTP {r.status_code}: {r.text[:200]}")
                if r.status_code >= 400:
                    last = Transport(f"{self.label} HTTP {r.status_code}")
                else:
                    try:
                        body = r.json()
                        return validate(body) if validate else body
                    except ValueError:
                        last = Malformed(f"{self.label} returned non-JSON body")
                    except (Malformed, Empty) as e:
                        last = e
            log(f"⚠️ {self.label} 呼叫失敗 (第 {attempt + 1}/{self.retries} 次): {last}")
            if attempt < self.retries - 1:
                time.sleep(self.backoff * (2 ** attempt))
        raise last


class HttpPolicyClient(_HttpBase, PolicyClient):
    name = "http"

    def __init__(self, **kwargs):
        super().__init__(label="policy", **kwargs)

    def call(self, req: PolicyRequest) -> str:
        def _check(body):
            text = body.get("text") if isinstance(body, dict) else None
            if not text:
                raise Malformed(f"policy response for {req.scene_id} has no text")
            try:
                parse_response(text)
            except CodecError as e:
                raise Malformed(f"policy response for {req.scene_id} does not parse: {e}")
            return text

        return self._post(req.to_payload(), {"Idempotency-Key": req.idempotency_key}, _check)


# ========== 6. 老師模型端 ==========
class TeacherClient:
    name = "base"

    def call(self, req: TeacherRequest) -> str:
        raise NotImplementedError


_PHRASES = {
    "Accelerate": "speeding up",
    "Decelerate": "slowing down",
    "Keep Speed": "holding the current speed",
    "Wait": "stopping and waiting",
    "Reverse": "backing up",
    "Straight": "driving straight",
    "Left Turn": "turning left",
    "Right Turn": "turning right",
    "Keep Lane": "lane keeping",
    "Left Lane Change": "a move into the left lane",
    "Right Lane Change": "a move into the right lane",
}

_OPENERS = (
    "Looking at the road ahead, my first plan needs a closer check.",
    "Checking the scene again, part of my plan does not fit.",
    "Reviewing the surroundings, I see a problem with my plan.",
)
_CONFIRM = (
    "Looking at the road ahead, my plan already fits the scene, so I keep it.",
    "Checking the scene again, the plan matches the traffic around me, so no change is needed.",
)
_SWAP = (
    "From {s}s to {e}s, {pred} is a poor choice given the traffic and road layout, so I should switch to {gt}.",
    "Between {s}s and {e}s, {pred} could lead to an unsafe gap, and {gt} suits the visible cues better.",
)
_ADD = (
    "From {s}s to {e}s I gave no {group} intent, so I should add {gt}.",
    "My plan is silent on {group} motion between {s}s and {e}s, so adding {gt} makes it complete.",
)
_DROP = (
    "From {s}s to {e}s, {pred} is not needed here, so I can leave {group} motion out.",
)


class StubTeacher(TeacherClient):
    """依 diff_plans 的結果套模板；每句都避開禁用詞，總字數不超過上限"""
    name = "stub"

    def __init__(self, max_words: int = 80):
        self.max_words = int(max_words)

    def call(self, req: TeacherRequest) -> str:
        diffs = diff_plans(req.predicted_plan, req.expert_plan)
        rng = rng_for("teacher", req.scene_id, req.predicted_text, req.expert_text)
        pick = lambda options: options[int(rng.integers(len(options)))]
        if not diffs:
            return pick(_CONFIRM)
        # 先講最長的差異區間
        ordered = sorted(diffs, key=lambda d: (-(d.end - d.start), GROUPS.index(d.group), d.start))
        sentences = [pick(_OPENERS)]
        for d in ordered:
            fmt = dict(s=f"{d.start / 10:.1f}", e=f"{d.end / 10:.1f}", group=d.group,
                       pred=_PHRASES.get(d.pred, ""), gt=_PHRASES.get(d.gt, ""))
            if d.pred == ABSENT:
                sentence = pick(_ADD).format(**fmt)
            elif d.gt == ABSENT:
                sentence = pick(_DROP).format(**fmt)
            else:
                sentence = pick(_SWAP).format(**fmt)
            if len(" ".join(sentences + [sentence]).split()) > self.max_words:
                break
            sentences.append(sentence)
        return " ".join(sentences)


class HttpTeacherClient(_HttpBase, TeacherClient):
    """chat-completions 風格的外部老師模型"""
    name = "http"

    def __init__(self, model: str = "", **kwargs):
        super().__init__(label="teacher", **kwargs)
        self.model = model

    def call(self, req: TeacherRequest) -> str:
        system, user = req.prompt
        payload = {
            "model": self.model,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
            "temperature": 0,
        }

        def _check(body):
            try:
                text = body["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError):
                raise Malformed(f"teacher response for {req.scene_id} has no message content")
            if not text or not text.strip():
                raise Empty(f"teacher returned an empty paragraph for {req.scene_id}")
            return text.strip()

        return self._post(payload, {"Idempotency-Key": f"{req.scene_id}:teacher"}, _check)


# ========== 7. 工廠 ==========
_HTTP_KEYS = ("endpoint", "api_key_env", "timeout", "retries", "backoff", "max_in_flight")


def build_policy(cfg: dict, scenes=(), strength: float = 0.3, noise: float = 0.0) -> PolicyClient:
    kind = (cfg or {}).get("kind", "mock")
    if kind == "mock":
        return MockPolicy(scenes, strength, noise)
    if kind == "http":
        return HttpPolicyClient(**{k: cfg[k] for k in _HTTP_KEYS if k in cfg})
    raise DataError(f"unknown policy client kind {kind!r}")


def build_teacher(cfg: dict) -> TeacherClient:
    kind = (cfg or {}).get("kind", "stub")
    if kind == "stub":
        return StubTeacher()
    if kind == "http":
        return HttpTeacherClient(model=cfg.get("model", ""), **{k: cfg[k] for k in _HTTP_KEYS if k in cfg})
    raise DataError(f"unknown teacher client kind {kind!r}")
