use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR not set");
    let header = PathBuf::from(&crate_dir).join("include").join("rtfq.h");

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    cbindgen::generate(&crate_dir)
        .expect("cbindgen failed to generate the C header")
        .write_to_file(&header);
}
