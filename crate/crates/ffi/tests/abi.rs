use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use imagechat::data::dataset::write_dataset;
use imagechat::data::synthetic::{toy_corpus, ToyCorpusConfig};
use imagechat::data::{build_vocab, is_question, tokenize};
use imagechat::generative::{GenConfig, GenerativeModel};
use imagechat::metrics::{binomial_two_tailed, bleu4, rouge_l, token_f1, PreferenceTally};
use imagechat::persist::{save_generative, save_retrieval};
use imagechat::retrieval::{RetrievalConfig, RetrievalModel};
use imagechat_ffi::*;
use serde_json::{json, Value};

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ic_last_error();
    assert!(!p.is_null(), "no error recorded");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

/// Takes ownership of a returned string and frees it.
fn take(p: *mut c_char) -> Value {
    assert!(!p.is_null());
    let v = serde_json::from_str(unsafe { CStr::from_ptr(p) }.to_str().unwrap()).unwrap();
    unsafe { ic_string_free(p) };
    v
}

#[test]
fn metrics_match_the_library() {
    let pairs = [
        ("the cat sat on the mat .", "the cat is on the mat ."),
        ("what a lovely day", "a lovely day indeed"),
        ("", "nothing here"),
        ("Who made this?", "who made this ?"),
    ];
    for (h, r) in pairs {
        let (th, tr) = (tokenize(h), tokenize(r));
        let mut v = f64::NAN;
        assert_eq!(unsafe { ic_rouge_l(c(h).as_ptr(), c(r).as_ptr(), &mut v) }, IcStatus::Ok);
        assert_eq!(v.to_bits(), rouge_l(&th, &tr).to_bits());
        assert_eq!(unsafe { ic_token_f1(c(h).as_ptr(), c(r).as_ptr(), &mut v) }, IcStatus::Ok);
        assert_eq!(v.to_bits(), token_f1(&th, &tr).to_bits());
        let mut q = false;
        assert_eq!(unsafe { ic_is_question(c(h).as_ptr(), &mut q) }, IcStatus::Ok);
        assert_eq!(q, is_question(h));
    }

    let hs: Vec<CString> = pairs.iter().map(|p| c(p.0)).collect();
    let rs: Vec<CString> = pairs.iter().map(|p| c(p.1)).collect();
    let hp: Vec<*const c_char> = hs.iter().map(|s| s.as_ptr()).collect();
    let rp: Vec<*const c_char> = rs.iter().map(|s| s.as_ptr()).collect();
    let expected = bleu4(
        &pairs.iter().map(|p| tokenize(p.0)).collect::<Vec<_>>(),
        &pairs.iter().map(|p| tokenize(p.1)).collect::<Vec<_>>(),
    )
    .unwrap();
    for (smoothed, want) in [(true, expected.smoothed), (false, expected.unsmoothed)] {
        let mut v = f64::NAN;
        assert_eq!(unsafe { ic_bleu4(hp.as_ptr(), rp.as_ptr(), hp.len(), smoothed, &mut v) }, IcStatus::Ok);
        assert_eq!(v.to_bits(), want.to_bits());
    }
    let mut v = 0.0;
    assert_eq!(unsafe { ic_bleu4(hp.as_ptr(), rp.as_ptr(), 0, true, &mut v) }, IcStatus::InvalidArgument);
    assert!(last_error().contains("empty"));
}

#[test]
fn binomial_p_values_are_exact() {
    let mut p = 0.0;
    assert_eq!(unsafe { ic_binomial_two_tailed(10, 0, &mut p) }, IcStatus::Ok);
    assert_eq!(p, 2.0 / 1024.0);
    assert_eq!(unsafe { ic_binomial_two_tailed(5, 5, &mut p) }, IcStatus::Ok);
    assert_eq!(p, 1.0);
    assert_eq!(unsafe { ic_binomial_two_tailed(130, 70, &mut p) }, IcStatus::Ok);
    assert_eq!(p, binomial_two_tailed(PreferenceTally::new(130, 70).unwrap()));
    assert_eq!(unsafe { ic_binomial_two_tailed(0, 0, &mut p) }, IcStatus::InvalidArgument);
    assert!(last_error().contains("empty"));
    assert_eq!(unsafe { ic_binomial_two_tailed(1, 0, ptr::null_mut()) }, IcStatus::NullArgument);
    assert_eq!(last_error(), "out is null");
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: String,
    image: String,
    styles: Vec<String>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = toy_corpus(&ToyCorpusConfig { n_examples: 10, seed: 3, ..Default::default() });
    let vocab = build_vocab(&corpus.examples, 1, &corpus.catalog);
    let ret = RetrievalModel::<f32>::new(RetrievalConfig::tiny(vocab.len(), corpus.catalog.len(), 16), vocab.clone(), corpus.catalog.clone(), 1)
        .unwrap();
    let mut gc = GenConfig::tiny(vocab.len(), 16);
    gc.max_decode_len = 6;
    let gen = GenerativeModel::<f32>::new(gc, vocab, corpus.catalog.clone(), 2).unwrap();
    let p = |n: &str| d.join(n).to_str().unwrap().to_string();
    save_retrieval(Path::new(&p("r.ckpt")), &ret, "h").unwrap();
    save_generative(Path::new(&p("g.ckpt")), &gen, "h").unwrap();
    corpus.features.save(Path::new(&p("f.imf"))).unwrap();
    write_dataset(Path::new(&p("d.jsonl")), &corpus.examples).unwrap();
    std::fs::write(p("c.tsv"), corpus.catalog.to_text()).unwrap();
    let config = json!({
        "features": p("f.imf"), "checkpoint": p("r.ckpt"), "gen_checkpoint": p("g.ckpt"),
        "data": p("d.jsonl"), "catalog": p("c.tsv"), "seed": 4,
    })
    .to_string();
    Fixture {
        _dir: dir,
        config,
        image: corpus.examples[0].image_id.clone(),
        styles: corpus.catalog.names().map(String::from).collect(),
    }
}

fn open(config: &str) -> *mut IcEngine {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { ic_engine_open(c(config).as_ptr(), &mut e) }, IcStatus::Ok, "{}", last_error());
    assert!(!e.is_null());
    e
}

fn chat(e: *const IcEngine, body: Value) -> (IcStatus, Value) {
    let mut out = ptr::null_mut();
    let s = unsafe { ic_engine_chat(e, c(&body.to_string()).as_ptr(), &mut out) };
    (s, if out.is_null() { Value::Null } else { take(out) })
}

#[test]
fn engine_sessions_round_trip() {
    let f = fixture();
    let e = open(&f.config);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ic_engine_catalog(e, &mut out) }, IcStatus::Ok);
    let cat = take(out);
    assert_eq!(cat["styles"].as_array().unwrap().len(), f.styles.len());
    assert!(cat["image_ids"].as_array().unwrap().iter().any(|i| i == f.image.as_str()));

    let (s, started) = chat(e, json!({"op": "start", "image_id": f.image, "style_model": f.styles[0]}));
    assert_eq!(s, IcStatus::Ok);
    let sid = started["session_id"].as_str().unwrap().to_string();
    let (s, reply) = chat(e, json!({"op": "say", "session_id": sid, "text": "what a view"}));
    assert_eq!(s, IcStatus::Ok);
    assert!(!reply["text"].as_str().unwrap().is_empty());
    let (s, _) = chat(e, json!({"op": "set", "session_id": sid, "model_kind": "generative"}));
    assert_eq!(s, IcStatus::Ok);
    let (s, _) = chat(e, json!({"op": "say", "session_id": sid, "text": "tell me more"}));
    assert_eq!(s, IcStatus::Ok);
    let (s, exported) = chat(e, json!({"op": "export", "session_id": sid}));
    assert_eq!(s, IcStatus::Ok);
    assert_eq!(exported["transcript"].as_array().unwrap().len(), 4);
    assert_eq!(exported["seed"], 4);

    let (s, once) = chat(e, json!({"image_id": f.image, "style": f.styles[1], "history": ["hi"]}));
    assert_eq!(s, IcStatus::Ok);
    let (_, again) = chat(e, json!({"image_id": f.image, "style": f.styles[1], "history": ["hi"]}));
    assert_eq!(once, again);

    let req = json!({"context": {"image_id": f.image, "style": f.styles[0], "history": []}, "candidates": ["a dog", "a cat", "the sea"]});
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ic_engine_rank(e, c(&req.to_string()).as_ptr(), &mut out) }, IcStatus::Ok);
    let ranked = take(out)["ranked"].as_array().unwrap().clone();
    assert_eq!(ranked.len(), 3);
    assert!(ranked.windows(2).all(|w| w[0]["score"].as_f64() >= w[1]["score"].as_f64()));

    unsafe { ic_engine_free(e) };
}

#[test]
fn engine_errors_carry_codes() {
    let f = fixture();
    let e = open(&f.config);
    let (s, body) = chat(e, json!({"op": "start", "image_id": "nope", "style_model": f.styles[0]}));
    assert_eq!(s, IcStatus::ApiError);
    assert_eq!(body["code"], "unknown_image");
    assert!(last_error().starts_with("unknown_image: "));
    let (s, body) = chat(e, json!({"op": "say", "session_id": "missing", "text": "x"}));
    assert_eq!((s, body["code"].as_str()), (IcStatus::ApiError, Some("unknown_session")));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ic_engine_chat(e, c("{not json").as_ptr(), &mut out) }, IcStatus::InvalidArgument);
    assert!(out.is_null());
    assert_eq!(unsafe { ic_engine_chat(ptr::null(), c("{}").as_ptr(), &mut out) }, IcStatus::NullArgument);
    assert_eq!(unsafe { ic_engine_catalog(e, ptr::null_mut()) }, IcStatus::NullArgument);
    unsafe { ic_engine_free(e) };
    unsafe { ic_engine_free(ptr::null_mut()) };
    unsafe { ic_string_free(ptr::null_mut()) };

    let mut e = ptr::null_mut();
    assert_eq!(unsafe { ic_engine_open(c(r#"{"feature": "x"}"#).as_ptr(), &mut e) }, IcStatus::InvalidArgument);
    assert!(e.is_null());
    assert_eq!(unsafe { ic_engine_open(c(r#"{"features": "/no/such/file.imf"}"#).as_ptr(), &mut e) }, IcStatus::LoadFailed);
    assert!(last_error().contains("/no/such/file.imf"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("imagechat.h")).unwrap();
    for f in ["ic_rouge_l", "ic_token_f1", "ic_bleu4", "ic_binomial_two_tailed", "ic_is_question", "ic_engine_open", "ic_string_free"] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"imagechat.h\"\nint main(void) {\n  double v; IcEngine *e = 0;\n  IcStatus s = ic_rouge_l(\"a\", \"a\", &v);\n  \
         s = ic_engine_open(\"{}\", &e);\n  ic_engine_free(e);\n  return s == IC_STATUS_OK ? 0 : (int)s;\n}\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = match Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"]).arg(&include).arg(&src).output() {
            Ok(o) => o,
            Err(_) => {
                eprintln!("{compiler} not found; skipping");
                continue;
            }
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
