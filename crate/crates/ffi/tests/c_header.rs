use std::path::PathBuf;
use std::process::Command;

// The generated header must compile as C and link against the static library.
#[test]
fn c_program_links_and_tracks() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    // the archive sits next to the test binary in deps/, and one level up after a plain build
    let deps = exe.parent().unwrap();
    let Some(lib) = [deps, deps.parent().unwrap()]
        .iter()
        .map(|d| d.join("libtokentrack_ffi.a"))
        .find(|p| p.is_file())
    else {
        eprintln!("skipping: static library not built");
        return;
    };
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("tt_smoke");
    let build = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&out)
        .output();
    let build = match build {
        Ok(b) => b,
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    };
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&out).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.lines().any(|l| l.starts_with("ok ")), "{stdout}");
}
