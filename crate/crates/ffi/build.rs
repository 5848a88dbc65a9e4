use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("itro_lab.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("ITRO_LAB_H".to_string()),
        cpp_compat: true,
        documentation: true,
        header: Some(
            "/* C interface to the itro-lab rationale-training laboratory. */".to_string(),
        ),
        usize_is_size_t: true,
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: true,
            ..Default::default()
        },
        ..Default::default()
    };

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation failed")
        .write_to_file(header);

    println!("cargo:rerun-if-changed=src/lib.rs");
}
