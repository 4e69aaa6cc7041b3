//! C ABI over the toxicity analyzer and the questionnaire engine.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every function returns an [`SsStatus`]; on failure a
//! description is available from [`ss_last_error_message`] on the same
//! thread. Strings returned through `out` parameters are NUL-terminated
//! UTF-8 JSON and must be released with [`ss_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chrono::Utc;
use safespace_core::questionnaire::{score_responses, Questionnaire, QuestionnaireError, ResponseSet};
use safespace_core::tox::{analyze_text, Lexicon, LexiconError, ScorerConfig, ToxError, Verdict};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The input was rejected: empty or oversized text, incomplete or
    /// mismatched responses.
    InvalidInput = 3,
    /// A lexicon, questionnaire or responses document did not parse.
    ParseError = 4,
    /// A file could not be read.
    IoError = 5,
    /// The library hit an internal bug. The handle is still safe to free.
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsVerdict {
    Clean = 0,
    Caution = 1,
    Abusive = 2,
}

impl From<Verdict> for SsVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Clean => SsVerdict::Clean,
            Verdict::Caution => SsVerdict::Caution,
            Verdict::Abusive => SsVerdict::Abusive,
        }
    }
}

/// Phrase lexicon plus the thresholds used to classify its scores.
pub struct SsLexicon {
    lexicon: Lexicon,
    config: ScorerConfig,
}

pub struct SsQuestionnaire {
    questionnaire: Questionnaire,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SsStatus, String);

impl Failure {
    fn null(name: &str) -> Self {
        Failure(SsStatus::NullArgument, format!("{name} is null"))
    }
}

impl From<ToxError> for Failure {
    fn from(e: ToxError) -> Self {
        let status = match e {
            ToxError::EmptyInput | ToxError::TextTooLong { .. } => SsStatus::InvalidInput,
            _ => SsStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<LexiconError> for Failure {
    fn from(e: LexiconError) -> Self {
        let status = match e {
            LexiconError::Io { .. } => SsStatus::IoError,
            _ => SsStatus::ParseError,
        };
        Failure(status, e.to_string())
    }
}

impl From<QuestionnaireError> for Failure {
    fn from(e: QuestionnaireError) -> Self {
        let status = match e {
            QuestionnaireError::Io(_) => SsStatus::IoError,
            QuestionnaireError::Parse(_) | QuestionnaireError::Validation(_) => SsStatus::ParseError,
            _ => SsStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    // Interior NULs cannot cross the boundary; drop them.
    let c = CString::new(message.replace('\0', "")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal error");
            SsStatus::Internal
        }
    }
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(SsStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn json_out(value: &impl serde::Serialize, out: *mut *mut c_char) -> Result<(), Failure> {
    let text = serde_json::to_string(value).map_err(|e| Failure(SsStatus::Internal, e.to_string()))?;
    let c = CString::new(text).map_err(|e| Failure(SsStatus::Internal, e.to_string()))?;
    // SAFETY: the caller checked `out` for null.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Loads a lexicon from `path`, or the bundled lexicon when `path` is null.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn ss_lexicon_load(path: *const c_char, out: *mut *mut SsLexicon) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = ptr::null_mut();
        let lexicon = if path.is_null() {
            Lexicon::bundled()
        } else {
            Lexicon::load(Path::new(str_arg(path, "path")?))?
        };
        let handle = SsLexicon {
            lexicon,
            config: ScorerConfig::default(),
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `lexicon` must be null or a handle from [`ss_lexicon_load`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn ss_lexicon_free(lexicon: *mut SsLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

/// Scores `text` and writes the full report as JSON: scores per category,
/// flagged spans with byte offsets, and the verdict.
///
/// # Safety
/// `lexicon` must be a live handle, `text` a NUL-terminated string, and
/// `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_analyze_text(
    lexicon: *const SsLexicon,
    text: *const c_char,
    out_json: *mut *mut c_char,
) -> SsStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(Failure::null("out_json"));
        }
        *out_json = ptr::null_mut();
        let handle = lexicon.as_ref().ok_or_else(|| Failure::null("lexicon"))?;
        let report = analyze_text(str_arg(text, "text")?, &handle.lexicon, &handle.config)?;
        json_out(&report, out_json)
    })
}

/// Verdict only, without allocating.
///
/// # Safety
/// As for [`ss_analyze_text`], with `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_classify(lexicon: *const SsLexicon, text: *const c_char, out: *mut SsVerdict) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let handle = lexicon.as_ref().ok_or_else(|| Failure::null("lexicon"))?;
        let report = analyze_text(str_arg(text, "text")?, &handle.lexicon, &handle.config)?;
        *out = report.verdict.into();
        Ok(())
    })
}

/// Loads a questionnaire definition from `path`, or the bundled one when
/// `path` is null.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn ss_questionnaire_load(path: *const c_char, out: *mut *mut SsQuestionnaire) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = ptr::null_mut();
        let questionnaire = if path.is_null() {
            Questionnaire::bundled()
        } else {
            Questionnaire::load(Path::new(str_arg(path, "path")?))?
        };
        *out = Box::into_raw(Box::new(SsQuestionnaire { questionnaire }));
        Ok(())
    })
}

/// # Safety
/// `questionnaire` must be null or a live handle from
/// [`ss_questionnaire_load`].
#[no_mangle]
pub unsafe extern "C" fn ss_questionnaire_free(questionnaire: *mut SsQuestionnaire) {
    if !questionnaire.is_null() {
        drop(Box::from_raw(questionnaire));
    }
}

/// Scores a responses document (`questionnaire_id`, `version`, `answers`)
/// and writes the assessment as JSON.
///
/// # Safety
/// `questionnaire` must be a live handle, `responses_json` a NUL-terminated
/// string, and `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_questionnaire_score(
    questionnaire: *const SsQuestionnaire,
    responses_json: *const c_char,
    out_json: *mut *mut c_char,
) -> SsStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(Failure::null("out_json"));
        }
        *out_json = ptr::null_mut();
        let handle = questionnaire.as_ref().ok_or_else(|| Failure::null("questionnaire"))?;
        let responses: ResponseSet = serde_json::from_str(str_arg(responses_json, "responses_json")?)
            .map_err(|e| Failure(SsStatus::ParseError, format!("responses: {e}")))?;
        let at = responses.submitted_at.unwrap_or_else(Utc::now);
        let assessment = score_responses(&handle.questionnaire, &responses, at)?;
        json_out(&assessment, out_json)
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Description of the last failure on the calling thread, or an empty
/// string after a success. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}
