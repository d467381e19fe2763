use std::path::{Path, PathBuf};
use std::process::Command;

fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn header() -> String {
    std::fs::read_to_string(manifest_dir().join("include/guidelab.h")).expect("header generated by build.rs")
}

#[test]
fn header_declares_the_api() {
    let h = header();
    for name in [
        "gl_last_error",
        "gl_string_free",
        "gl_trust_coefficient",
        "gl_polarity_to_reward",
        "gl_group_advantages",
        "gl_clipped_surrogate",
        "gl_hindsight_judge",
        "gl_trajectory_from_json",
        "gl_trajectory_free",
        "gl_trajectory_len",
        "gl_trajectory_composite_return",
        "gl_trajectory_to_json",
        "gl_env_new",
        "gl_env_reset",
        "gl_env_step",
        "gl_env_admissible",
        "gl_env_free",
        "typedef struct GlEnv GlEnv;",
        "typedef struct GlTrajectory GlTrajectory;",
        "GL_STATUS_BUFFER_TOO_SMALL = 5",
    ] {
        assert!(h.contains(name), "header is missing {name}");
    }
}

/// The static library next to this test binary (`deps/`) or in the profile
/// directory above it.
fn static_library() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    [deps, deps.parent().unwrap()]
        .iter()
        .map(|d| d.join("libguidelab_ffi.a"))
        .find(|p| p.exists())
        .expect("libguidelab_ffi.a is built alongside the tests")
}

#[test]
fn c_program_links_against_static_library() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler ({cc})");
        return;
    }
    let lib = static_library();
    let out_dir = tempfile::tempdir().unwrap();
    let exe = out_dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest_dir().join("include"))
        .arg(manifest_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let run = Command::new(&exe).output().unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
