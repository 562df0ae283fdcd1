use std::path::Path;
use std::process::Command;

const EXPORTS: &[&str] = &[
    "kpbe_last_error_message",
    "kpbe_version",
    "kpbe_model_new",
    "kpbe_model_load",
    "kpbe_model_free",
    "kpbe_model_resolution",
    "kpbe_source_new",
    "kpbe_source_free",
    "kpbe_enhance_frame",
    "kpbe_reenact_frame",
    "kpbe_psnr",
    "kpbe_ssim",
];

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kpbe.h")).unwrap()
}

#[test]
fn header_declares_every_export() {
    let h = header();
    for name in EXPORTS {
        assert!(h.contains(&format!("{name}(")), "{name} missing from kpbe.h");
    }
    assert!(h.contains("typedef struct KpbeModel KpbeModel;"));
    assert!(h.contains("KPBE_STATUS_INVALID_ROTATION = 4"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"kpbe.h\"\nint main(void) { KpbeModel *m = 0; return kpbe_model_new(1, &m) == KPBE_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected kpbe.h"),
            Err(_) => eprintln!("{compiler} not available; skipping"),
        }
    }
}
