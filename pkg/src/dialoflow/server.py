"""HTTP chat/scoring service.

Sessions are in-memory: one lock per session serializes messages to the
same session while distinct sessions run concurrently over the shared
frozen checkpoint.  Every response carries the checkpoint hash.
"""

from __future__ import annotations

import os
import threading
import time
import uuid

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .flow_score import ConversationLog, ScoringError, score_log
from .generation import ChatSession, DecodeConfig, chat_step
from .model import forward
from .data import EncodingError, encode_dialogue, normalize_sample
from .trajectory import trajectory_points
from .training import checkpoint_hash, load_checkpoint

DEFAULT_MAX_SESSIONS = 64
DEFAULT_IDLE_SECONDS = 3600.0


class DecodeOptions(BaseModel):
    strategy: str = Field(default="greedy", pattern="^(greedy|beam)$")
    beam_width: int = Field(default=5, ge=1, le=64)
    max_new_tokens: int = Field(default=24, ge=1, le=256)
    length_alpha: float = Field(default=0.7, ge=0.0, le=2.0)


class MessageBody(BaseModel):
    text: str = Field(min_length=1)


class TurnBody(BaseModel):
    speaker: str = Field(pattern="^(human|bot)$")
    text: str


class ScoreBody(BaseModel):
    turns: list[TurnBody]
    rating: float | None = None
    bot_id: str | None = None


class _Session:
    def __init__(self, chat: ChatSession):
        self.chat = chat
        self.lock = threading.Lock()
        self.created = time.monotonic()
        self.last_active = self.created


def create_app(
    ckpt_path: str | None = None,
    max_sessions: int = DEFAULT_MAX_SESSIONS,
    idle_seconds: float = DEFAULT_IDLE_SECONDS,
    cors_origins: list[str] | None = None,
) -> FastAPI:
    ckpt_path = ckpt_path or os.environ.get("DIALOFLOW_CKPT")
    if not ckpt_path:
        raise ValueError("no checkpoint: pass ckpt_path or set DIALOFLOW_CKPT")
    params, model_cfg, vocab, _, _ = load_checkpoint(ckpt_path)
    ckpt_hash = checkpoint_hash(ckpt_path)

    app = FastAPI(title="dialoflow")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    sessions: dict[str, _Session] = {}
    store_lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        fields = [".".join(str(p) for p in err["loc"]) for err in exc.errors()]
        return JSONResponse(
            status_code=400,
            content={"error": "malformed body", "fields": fields},
        )

    @app.middleware("http")
    async def _provenance(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-Checkpoint-Hash"] = ckpt_hash
        return response

    def _expire_idle() -> None:
        now = time.monotonic()
        for sid in [s for s, sess in sessions.items() if now - sess.last_active > idle_seconds]:
            del sessions[sid]

    def _get_session(session_id: str) -> _Session | None:
        with store_lock:
            _expire_idle()
            return sessions.get(session_id)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "checkpoint_hash": ckpt_hash, "sessions": len(sessions)}

    @app.post("/sessions", status_code=201)
    def create_session(options: DecodeOptions | None = None):
        opts = options or DecodeOptions()
        with store_lock:
            _expire_idle()
            if len(sessions) >= max_sessions:
                return JSONResponse(status_code=429, content={"error": "session capacity exceeded"})
            sid = uuid.uuid4().hex
            sessions[sid] = _Session(
                ChatSession(
                    vocab=vocab,
                    model_cfg=model_cfg,
                    decode_cfg=DecodeConfig(
                        strategy=opts.strategy,
                        beam_width=opts.beam_width,
                        max_new_tokens=opts.max_new_tokens,
                        length_alpha=opts.length_alpha,
                    ),
                )
            )
        return {"session_id": sid, "checkpoint_hash": ckpt_hash}

    @app.post("/sessions/{session_id}/message")
    def post_message(session_id: str, body: MessageBody):
        sess = _get_session(session_id)
        if sess is None:
            return JSONResponse(status_code=404, content={"error": "unknown session"})
        with sess.lock:
            sess.last_active = time.monotonic()
            try:
                reply, diag = chat_step(sess.chat, body.text, params)
            except EncodingError as exc:
                return JSONResponse(status_code=400, content={"error": str(exc)})
        return {
            "reply": reply,
            "turn_index": diag.turn_index,
            "s_k": diag.similarity,
            "flow_running": diag.flow_running,
            "influence_norms": {
                "predicted": diag.predicted_norm,
                "realized": diag.realized_norm,
            },
            "truncated": diag.truncated,
            "checkpoint_hash": ckpt_hash,
        }

    @app.get("/sessions/{session_id}/trajectory")
    def get_trajectory(session_id: str):
        sess = _get_session(session_id)
        if sess is None:
            return JSONResponse(status_code=404, content={"error": "unknown session"})
        with sess.lock:
            chat = sess.chat
            if not chat.utterances:
                return {"points": []}
            sample = normalize_sample(chat.utterances)
            encoded = encode_dialogue(sample, vocab, model_cfg.max_positions)
            out = forward(encoded, params, model_cfg, train=False)
            speakers = [sp for sp, _ in sample.utterances][-encoded.n_utterances :]
            points = trajectory_points(out.contexts.data, speakers)
        return {"points": points}

    @app.post("/score")
    def post_score(body: ScoreBody):
        log = ConversationLog(
            turns=[{"speaker": t.speaker, "text": t.text} for t in body.turns],
            rating=body.rating,
            bot_id=body.bot_id,
        )
        try:
            report = score_log(log, params, model_cfg, vocab)
        except ScoringError as exc:
            return JSONResponse(status_code=400, content={"error": str(exc)})
        return report.to_json()

    return app
