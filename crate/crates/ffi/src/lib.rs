//! C ABI for the autoskill runtime.
//!
//! Every function returns an [`AsStatus`]. On failure a message is stored
//! per thread and can be fetched with [`as_last_error_message`]. Strings
//! returned through out-parameters are owned by the caller and must be
//! released with [`as_string_free`]; handles are released with their
//! matching `*_free` function. Structured results are JSON.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use autoskill::agent::truncate_tool_output;
use autoskill::context::{
    maybe_compress_history, AgentContext, CompressionBudget, HeadTruncationSummarizer, TurnPayload,
};
use autoskill::skill_bank::SkillBank;
use autoskill::skill_package::{parse_skill_md, validate_package};
use autoskill::{memory, SystemClock};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Io = 4,
    Compression = 5,
    Panic = 6,
}

/// Opaque handle to an open skill bank.
pub struct AsBank(SkillBank);

/// Opaque handle to a conversation context.
pub struct AsContext(AgentContext);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(AsStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: AsStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> AsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(AsStatus::NullArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(AsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> FfiResult<()> {
    if out.is_null() {
        return fail(AsStatus::NullArgument, "output pointer is null");
    }
    let c = CString::new(s).or_else(|_| fail(AsStatus::InvalidInput, "result contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().map_or_else(
        || fail(AsStatus::NullArgument, format!("{what} is null")),
        Ok,
    )
}

fn to_json(v: &impl serde::Serialize) -> FfiResult<String> {
    serde_json::to_string(v).or_else(|e| fail(AsStatus::InvalidInput, e.to_string()))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn as_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn as_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Validates the package directory `dir`; writes the report as JSON.
/// A package with findings still returns `Ok`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out_json` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn as_skill_validate(
    dir: *const c_char,
    out_json: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let report = validate_package(Path::new(dir));
        write_string(out_json, to_json(&report)?)
    })
}

/// Parses `SKILL.md` text for directory `dir_name` and re-renders it.
/// The rendering is byte-identical to the input for any accepted file.
///
/// # Safety
/// `text` and `dir_name` must be NUL-terminated; `out_rendered` writable.
#[no_mangle]
pub unsafe extern "C" fn as_skill_md_render(
    text: *const c_char,
    dir_name: *const c_char,
    out_rendered: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        let parsed = parse_skill_md(str_arg(text, "text")?, str_arg(dir_name, "dir_name")?)
            .or_else(|e| fail(AsStatus::InvalidInput, e.to_string()))?;
        write_string(out_rendered, parsed.skill_md.render())
    })
}

/// Opens (creating if needed) the skill bank at `dir`.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn as_bank_open(dir: *const c_char, out: *mut *mut AsBank) -> AsStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return fail(AsStatus::NullArgument, "out is null");
        }
        let bank = SkillBank::open(dir, Arc::new(SystemClock))
            .or_else(|e| fail(AsStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(AsBank(bank)));
        Ok(())
    })
}

/// Writes the catalog of registered skills in its YAML form.
///
/// # Safety
/// `bank` must come from [`as_bank_open`]; `out_yaml` writable.
#[no_mangle]
pub unsafe extern "C" fn as_bank_catalog_yaml(
    bank: *mut AsBank,
    out_yaml: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        let bank = handle(bank, "bank")?;
        bank.0
            .refresh()
            .or_else(|e| fail(AsStatus::Io, e.to_string()))?;
        write_string(out_yaml, bank.0.build_catalog().to_yaml())
    })
}

/// # Safety
/// `bank` must come from [`as_bank_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_bank_free(bank: *mut AsBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Creates an empty context with the given compression budget.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_context_new(
    compress_token_threshold: usize,
    node_compress_token_threshold: usize,
    keep_first_turns: usize,
    keep_last_turns: usize,
    out: *mut *mut AsContext,
) -> AsStatus {
    guard(|| {
        if out.is_null() {
            return fail(AsStatus::NullArgument, "out is null");
        }
        let budget = CompressionBudget {
            compress_token_threshold,
            node_compress_token_threshold,
            keep_first_turns,
            keep_last_turns,
        };
        budget
            .validate()
            .or_else(|e| fail(AsStatus::InvalidInput, e.to_string()))?;
        *out = Box::into_raw(Box::new(AsContext(AgentContext::new(budget))));
        Ok(())
    })
}

/// Appends a plain-text turn.
///
/// # Safety
/// `ctx` must come from [`as_context_new`]; `text` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn as_context_append_text(
    ctx: *mut AsContext,
    text: *const c_char,
) -> AsStatus {
    guard(|| {
        let ctx = handle(ctx, "ctx")?;
        ctx.0.append_turn(TurnPayload::text(str_arg(text, "text")?));
        Ok(())
    })
}

/// Token estimate of the active chain.
///
/// # Safety
/// `ctx` must come from [`as_context_new`]; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn as_context_active_tokens(
    ctx: *mut AsContext,
    out: *mut usize,
) -> AsStatus {
    guard(|| {
        let ctx = handle(ctx, "ctx")?;
        let n = ctx
            .0
            .active_tokens()
            .or_else(|e| fail(AsStatus::Compression, e.to_string()))?;
        *handle(out, "out")? = n;
        Ok(())
    })
}

/// Compresses the history if it is over budget, summarizing by keeping the
/// first `summary_bytes` bytes. Writes the compression report as JSON.
///
/// # Safety
/// `ctx` must come from [`as_context_new`]; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn as_context_compress(
    ctx: *mut AsContext,
    summary_bytes: usize,
    out_json: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        let ctx = handle(ctx, "ctx")?;
        let mut summarizer = HeadTruncationSummarizer {
            max_bytes: summary_bytes,
        };
        let report = maybe_compress_history(&mut ctx.0, &mut summarizer)
            .or_else(|e| fail(AsStatus::Compression, e.to_string()))?;
        write_string(out_json, to_json(&report)?)
    })
}

/// Writes every original turn, oldest first, as a JSON array.
///
/// # Safety
/// `ctx` must come from [`as_context_new`]; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn as_context_replay_json(
    ctx: *mut AsContext,
    out_json: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        let ctx = handle(ctx, "ctx")?;
        let turns = ctx
            .0
            .replay_full_history()
            .or_else(|e| fail(AsStatus::Compression, e.to_string()))?;
        write_string(out_json, to_json(&turns)?)
    })
}

/// # Safety
/// `ctx` must come from [`as_context_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_context_free(ctx: *mut AsContext) {
    if !ctx.is_null() {
        drop(Box::from_raw(ctx));
    }
}

/// Appends a timestamped block to the memory file at `path`; writes the
/// block's header line.
///
/// # Safety
/// `path` and `content` must be NUL-terminated; `out_header` writable.
#[no_mangle]
pub unsafe extern "C" fn as_memory_append(
    path: *const c_char,
    content: *const c_char,
    out_header: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let content = str_arg(content, "content")?;
        let block = memory::append_block(Path::new(path), content, &SystemClock).or_else(|e| {
            let status = match e {
                memory::MemoryError::Io { .. } => AsStatus::Io,
                _ => AsStatus::InvalidInput,
            };
            fail(status, e.to_string())
        })?;
        let ts = block.timestamp.expect("appended blocks carry a timestamp");
        write_string(out_header, memory::format_header(ts))
    })
}

/// Cuts `text` to at most `limit` characters, marking what was omitted.
///
/// # Safety
/// `text` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn as_truncate_tool_output(
    text: *const c_char,
    limit: usize,
    out: *mut *mut c_char,
) -> AsStatus {
    guard(|| write_string(out, truncate_tool_output(str_arg(text, "text")?, limit)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    unsafe fn take(p: *mut c_char) -> String {
        let s = CStr::from_ptr(p).to_str().unwrap().to_string();
        as_string_free(p);
        s
    }

    #[test]
    fn truncation_and_errors() {
        unsafe {
            let mut out = ptr::null_mut();
            let text = c(&"a".repeat(100));
            assert_eq!(
                as_truncate_tool_output(text.as_ptr(), 60, &mut out),
                AsStatus::Ok
            );
            let s = take(out);
            assert_eq!(s.chars().count(), 60);
            assert!(s.ends_with(" chars omitted]"));
            assert!(as_last_error_message().is_null());

            assert_eq!(
                as_truncate_tool_output(ptr::null(), 60, &mut out),
                AsStatus::NullArgument
            );
            let msg = CStr::from_ptr(as_last_error_message()).to_str().unwrap();
            assert_eq!(msg, "text is null");
        }
    }

    #[test]
    fn skill_md_render_round_trips() {
        unsafe {
            let text = "---\nname: demo\ndescription: Demo skill.\n---\n\n# Demo\n";
            let mut out = ptr::null_mut();
            assert_eq!(
                as_skill_md_render(c(text).as_ptr(), c("demo").as_ptr(), &mut out),
                AsStatus::Ok
            );
            assert_eq!(take(out), text);
            assert_eq!(
                as_skill_md_render(c("no frontmatter").as_ptr(), c("demo").as_ptr(), &mut out),
                AsStatus::InvalidInput
            );
        }
    }

    #[test]
    fn validate_reports_json() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("Bad Name");
        std::fs::create_dir(&dir).unwrap();
        unsafe {
            let mut out = ptr::null_mut();
            assert_eq!(
                as_skill_validate(c(dir.to_str().unwrap()).as_ptr(), &mut out),
                AsStatus::Ok
            );
            let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
            assert!(!v["errors"].as_array().unwrap().is_empty());
        }
    }

    #[test]
    fn context_compresses_and_replays() {
        unsafe {
            let mut ctx = ptr::null_mut();
            assert_eq!(as_context_new(200, 30, 1, 1, &mut ctx), AsStatus::Ok);
            for i in 0..6 {
                let t = c(&format!("{i}{}", "x".repeat(200)));
                assert_eq!(as_context_append_text(ctx, t.as_ptr()), AsStatus::Ok);
            }
            let mut tokens = 0;
            assert_eq!(as_context_active_tokens(ctx, &mut tokens), AsStatus::Ok);
            assert_eq!(tokens, 306);
            let mut out = ptr::null_mut();
            assert_eq!(as_context_compress(ctx, 16, &mut out), AsStatus::Ok);
            let report: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
            assert_eq!(report["level"], "level1");
            assert_eq!(report["level1_positions"], serde_json::json!([1, 2, 3]));
            assert_eq!(as_context_active_tokens(ctx, &mut tokens), AsStatus::Ok);
            assert_eq!(tokens, 165);
            assert_eq!(as_context_replay_json(ctx, &mut out), AsStatus::Ok);
            let turns: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
            assert_eq!(turns.as_array().unwrap().len(), 6);
            as_context_free(ctx);

            assert_eq!(
                as_context_new(0, 30, 1, 1, &mut ctx),
                AsStatus::InvalidInput
            );
        }
    }

    #[test]
    fn bank_and_memory() {
        let tmp = tempfile::tempdir().unwrap();
        unsafe {
            let mut bank = ptr::null_mut();
            let dir = c(tmp.path().join("skills").to_str().unwrap());
            assert_eq!(as_bank_open(dir.as_ptr(), &mut bank), AsStatus::Ok);
            let mut out = ptr::null_mut();
            assert_eq!(as_bank_catalog_yaml(bank, &mut out), AsStatus::Ok);
            assert_eq!(take(out), "");
            as_bank_free(bank);

            let file = c(tmp.path().join("memory.md").to_str().unwrap());
            assert_eq!(
                as_memory_append(file.as_ptr(), c("note").as_ptr(), &mut out),
                AsStatus::Ok
            );
            let header = take(out);
            assert!(memory::parse_header(&header).is_some(), "{header}");
            assert_eq!(
                as_memory_append(file.as_ptr(), c("  ").as_ptr(), &mut out),
                AsStatus::InvalidInput
            );
        }
    }
}
