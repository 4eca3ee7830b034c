"""HTTP/JSON front end for :class:`Scheduler`.

Routes::

    POST /workers/{id}/next-job      -> 200 TrainJob | 204
    POST /jobs/{id}/complete          -> 200 | 404 | 409 (stale-lease / not-leased)
    POST /jobs/{id}/heartbeat         -> 200 | 409      body {"worker_id": ...}
    POST /jobs/{id}/fail              -> 200 | 404 | 409 body {"worker_id", "attempt"}
    POST /jobs                        -> 201 {"job_id"}  ad-hoc job (sweeps)
    GET  /jobs/{id}                   -> 200 TrainJob | 404
    GET  /tree                        -> tree.json document
    GET  /status                      -> status snapshot
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..phylogeny import ReproductionPlan
from .jobs import JobResult
from .scheduler import LeaseRejected, Scheduler, SchedulerError, UnknownJob

log = logging.getLogger(__name__)

_NEXT = re.compile(r"^/workers/([^/]+)/next-job$")
_JOB_ACTION = re.compile(r"^/jobs/([^/]+)/(complete|heartbeat|fail)$")
_JOB = re.compile(r"^/jobs/([^/]+)$")


def _error_status(exc: SchedulerError) -> HTTPStatus:
    if isinstance(exc, UnknownJob):
        return HTTPStatus.NOT_FOUND
    return HTTPStatus.CONFLICT


class _Handler(BaseHTTPRequestHandler):
    scheduler: Scheduler  # set on the subclass built by make_server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging instead of stderr
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: HTTPStatus, body: dict | None = None) -> None:
        data = b"" if body is None else json.dumps(body).encode("utf-8")
        self.send_response(status)
        if body is not None:
            self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        if data:
            self.wfile.write(data)

    def _body(self) -> dict:
        n = int(self.headers.get("Content-Length") or 0)
        if not n:
            return {}
        return json.loads(self.rfile.read(n).decode("utf-8"))

    def do_GET(self) -> None:
        s = self.scheduler
        if self.path == "/tree":
            return self._send(HTTPStatus.OK, s.tree_document())
        if self.path == "/status":
            return self._send(HTTPStatus.OK, s.snapshot_status())
        m = _JOB.match(self.path)
        if m:
            try:
                return self._send(HTTPStatus.OK, s.get_job(m.group(1)).to_dict())
            except UnknownJob as e:
                return self._send(HTTPStatus.NOT_FOUND, {"error": e.code, "detail": str(e)})
        self._send(HTTPStatus.NOT_FOUND, {"error": "no-route"})

    def do_POST(self) -> None:
        s = self.scheduler
        try:
            body = self._body()
        except (ValueError, UnicodeDecodeError):
            return self._send(HTTPStatus.BAD_REQUEST, {"error": "bad-json"})
        try:
            m = _NEXT.match(self.path)
            if m:
                job = s.next_job(m.group(1))
                if job is None:
                    return self._send(HTTPStatus.NO_CONTENT)
                doc = job.to_dict()
                doc["lease_duration"] = s.config.lease_duration
                return self._send(HTTPStatus.OK, doc)
            m = _JOB_ACTION.match(self.path)
            if m:
                job_id, action = m.groups()
                if action == "complete":
                    result = JobResult.from_dict(body)
                    if result.job_id != job_id:
                        return self._send(HTTPStatus.BAD_REQUEST, {"error": "job-id-mismatch"})
                    return self._send(HTTPStatus.OK, {"status": s.complete_job(job_id, result)})
                if action == "heartbeat":
                    try:
                        expiry = s.heartbeat(str(body["worker_id"]), job_id)
                    except LeaseRejected as e:
                        return self._send(HTTPStatus.CONFLICT, {"error": e.code, "detail": str(e)})
                    return self._send(HTTPStatus.OK, {"expiry": expiry})
                s.fail_job(job_id, str(body["worker_id"]), int(body["attempt"]))
                return self._send(HTTPStatus.OK, {"status": "requeued-or-failed"})
            if self.path == "/jobs":
                plan = ReproductionPlan.from_dict(body["plan"])
                job = s.submit_job(plan, body.get("expert_refs", {}), body.get("env_config"),
                                   body.get("trainer_config"))
                return self._send(HTTPStatus.CREATED, {"job_id": job.job_id})
        except SchedulerError as e:
            return self._send(_error_status(e), {"error": e.code, "detail": str(e)})
        except (KeyError, TypeError, ValueError) as e:
            return self._send(HTTPStatus.BAD_REQUEST, {"error": "bad-request", "detail": str(e)})
        self._send(HTTPStatus.NOT_FOUND, {"error": "no-route"})


def make_server(scheduler: Scheduler, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("SchedulerHandler", (_Handler,), {"scheduler": scheduler})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve(scheduler: Scheduler, host: str = "127.0.0.1", port: int = 8765, keep_alive: bool = False,
          reap_interval: float = 5.0, linger: float = 10.0, on_ready=None) -> None:
    """Serve until the generation budget is met (or forever with ``keep_alive``)."""
    server = make_server(scheduler, host, port)
    thread = threading.Thread(target=server.serve_forever, name="scheduler-http", daemon=True)
    thread.start()
    addr = f"http://{server.server_address[0]}:{server.server_address[1]}"
    log.info("scheduler listening on %s", addr)
    if on_ready is not None:
        on_ready(addr)
    try:
        finished_at = None
        while True:
            time.sleep(reap_interval)
            scheduler.requeue_expired()
            if keep_alive:
                continue
            if scheduler.finished:
                finished_at = finished_at or time.monotonic()
                if time.monotonic() - finished_at >= linger:
                    break
            else:
                finished_at = None
    finally:
        server.shutdown()
        server.server_close()
