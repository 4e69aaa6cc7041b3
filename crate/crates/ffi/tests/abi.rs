use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use safespace_ffi::*;
use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ss_last_error_message()) }.to_str().unwrap().to_string()
}

/// Takes ownership of a returned string and parses it.
fn take_json(p: *mut c_char) -> Value {
    assert!(!p.is_null());
    let v = serde_json::from_str(unsafe { CStr::from_ptr(p) }.to_str().unwrap()).unwrap();
    unsafe { ss_string_free(p) };
    v
}

fn bundled_lexicon() -> *mut SsLexicon {
    let mut lex = ptr::null_mut();
    assert_eq!(unsafe { ss_lexicon_load(ptr::null(), &mut lex) }, SsStatus::Ok);
    lex
}

#[test]
fn analyze_and_classify() {
    let lex = bundled_lexicon();
    let text = cstr("You’re such a loser. I hate you.");
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ss_analyze_text(lex, text.as_ptr(), &mut out) }, SsStatus::Ok);
    let report = take_json(out);
    assert_eq!(report["verdict"], "Abusive");
    assert!(!report["spans"].as_array().unwrap().is_empty());
    assert_eq!(last_error(), "");

    let mut verdict = SsVerdict::Clean;
    assert_eq!(unsafe { ss_classify(lex, text.as_ptr(), &mut verdict) }, SsStatus::Ok);
    assert_eq!(verdict, SsVerdict::Abusive);
    let calm = cstr("See you at dinner.");
    assert_eq!(unsafe { ss_classify(lex, calm.as_ptr(), &mut verdict) }, SsStatus::Ok);
    assert_eq!(verdict, SsVerdict::Clean);
    unsafe { ss_lexicon_free(lex) };
}

#[test]
fn argument_errors_carry_status_and_message() {
    let lex = bundled_lexicon();
    let mut out = ptr::null_mut();
    let blank = cstr("   ");
    assert_eq!(unsafe { ss_analyze_text(lex, blank.as_ptr(), &mut out) }, SsStatus::InvalidInput);
    assert!(out.is_null());
    assert!(last_error().contains("empty"));

    assert_eq!(unsafe { ss_analyze_text(lex, ptr::null(), &mut out) }, SsStatus::NullArgument);
    assert_eq!(last_error(), "text is null");
    assert_eq!(unsafe { ss_analyze_text(ptr::null(), blank.as_ptr(), &mut out) }, SsStatus::NullArgument);
    assert_eq!(unsafe { ss_analyze_text(lex, blank.as_ptr(), ptr::null_mut()) }, SsStatus::NullArgument);

    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { ss_analyze_text(lex, bad.as_ptr().cast(), &mut out) },
        SsStatus::InvalidUtf8
    );

    let huge = cstr(&"a".repeat(64 * 1024));
    assert_eq!(unsafe { ss_analyze_text(lex, huge.as_ptr(), &mut out) }, SsStatus::InvalidInput);

    // Freeing null is a no-op.
    unsafe {
        ss_lexicon_free(ptr::null_mut());
        ss_questionnaire_free(ptr::null_mut());
        ss_string_free(ptr::null_mut());
        ss_lexicon_free(lex);
    }
}

#[test]
fn custom_lexicon_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lex.tsv");
    std::fs::write(&path, "pineapple\tTOXICITY:0.95\n").unwrap();
    let p = cstr(path.to_str().unwrap());
    let mut lex = ptr::null_mut();
    assert_eq!(unsafe { ss_lexicon_load(p.as_ptr(), &mut lex) }, SsStatus::Ok);
    let mut verdict = SsVerdict::Clean;
    let text = cstr("pineapple on pizza");
    assert_eq!(unsafe { ss_classify(lex, text.as_ptr(), &mut verdict) }, SsStatus::Ok);
    assert_eq!(verdict, SsVerdict::Abusive);
    unsafe { ss_lexicon_free(lex) };

    std::fs::write(&path, "no weights here\n").unwrap();
    let mut lex = ptr::null_mut();
    assert_eq!(unsafe { ss_lexicon_load(p.as_ptr(), &mut lex) }, SsStatus::ParseError);
    assert!(lex.is_null());
    let missing = cstr("/no/such/lexicon.tsv");
    assert_eq!(unsafe { ss_lexicon_load(missing.as_ptr(), &mut lex) }, SsStatus::IoError);
    assert!(last_error().contains("/no/such/lexicon.tsv"));
}

#[test]
fn questionnaire_scoring() {
    let path = cstr(fixture("questionnaire/five_item.json").to_str().unwrap());
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { ss_questionnaire_load(path.as_ptr(), &mut q) }, SsStatus::Ok);

    let responses = cstr(&std::fs::read_to_string(fixture("questionnaire/responses_60.json")).unwrap());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ss_questionnaire_score(q, responses.as_ptr(), &mut out) }, SsStatus::Ok);
    let a = take_json(out);
    assert_eq!(a["category"], "NeedsReflection");
    assert_eq!(a["feedback"], "Caution – signs of concern. Please reflect.");

    let incomplete = cstr(&std::fs::read_to_string(fixture("questionnaire/responses_incomplete.json")).unwrap());
    assert_eq!(unsafe { ss_questionnaire_score(q, incomplete.as_ptr(), &mut out) }, SsStatus::InvalidInput);
    assert!(last_error().contains("unanswered"));
    let junk = cstr("{not json");
    assert_eq!(unsafe { ss_questionnaire_score(q, junk.as_ptr(), &mut out) }, SsStatus::ParseError);
    unsafe { ss_questionnaire_free(q) };

    let mut bundled = ptr::null_mut();
    assert_eq!(unsafe { ss_questionnaire_load(ptr::null(), &mut bundled) }, SsStatus::Ok);
    // Answers for the five-item form do not fit the bundled one.
    assert_eq!(unsafe { ss_questionnaire_score(bundled, responses.as_ptr(), &mut out) }, SsStatus::InvalidInput);
    unsafe { ss_questionnaire_free(bundled) };
}

#[test]
fn errors_are_per_thread() {
    let lex = bundled_lexicon() as usize;
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ss_analyze_text(lex as *const _, ptr::null(), &mut out) }, SsStatus::NullArgument);
    std::thread::spawn(move || {
        let mut v = SsVerdict::Clean;
        let t = cstr("hello");
        assert_eq!(unsafe { ss_classify(lex as *const _, t.as_ptr(), &mut v) }, SsStatus::Ok);
        assert_eq!(last_error(), "");
    })
    .join()
    .unwrap();
    assert_eq!(last_error(), "text is null");
    unsafe { ss_lexicon_free(lex as *mut _) };
}

#[test]
fn header_is_current() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/safespace.h")).unwrap();
    for symbol in [
        "ss_lexicon_load",
        "ss_lexicon_free",
        "ss_analyze_text",
        "ss_classify",
        "ss_questionnaire_load",
        "ss_questionnaire_free",
        "ss_questionnaire_score",
        "ss_string_free",
        "ss_last_error_message",
        "typedef struct SsLexicon SsLexicon;",
        "SS_STATUS_INVALID_INPUT = 3",
        "SS_VERDICT_ABUSIVE = 2",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
