//! HTTP front end for collecting preference labels and chatting with a
//! trained policy.
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | GET | `/api/tasks/next?annotator=ID` | | `LabelTask`, or 204 when none |
//! | POST | `/api/tasks/{id}/label` | `{annotator, choice}` | `LabelAck` |
//! | POST | `/api/chat` | `{segment}` | `{session_id}` |
//! | POST | `/api/chat/{id}/message` | `{text}` | `{reply, turn, done}` |
//! | GET | `/api/metrics` | | `ServiceMetrics` |
//! | GET | `/api/health` | | `{status}` |
//!
//! Errors are returned as `{error, code}`.

mod http;
mod service;

pub use http::{router, serve, ErrorBody};
pub use service::{
    Candidate, ChatReply, ChatSession, FeedbackService, LabelAck, LabelTask, ServiceError, ServiceMetrics,
    ServiceOptions, ServiceResult, StateView, TaskStatus, Turn,
};
