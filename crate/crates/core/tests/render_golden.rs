//! Byte-exact PNG regression. Set `SISIFUS_BLESS=1` to rewrite the golden files.

use std::path::PathBuf;

use sisifus::phantom::{generate_scene, preset_scene, Preset};
use sisifus::render::{composite, encode_png, ClaheConfig, Colormap};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn compare(name: &str, bytes: &[u8]) {
    let path = golden(name);
    if std::env::var_os("SISIFUS_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
        return;
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == bytes, "{name} differs from the golden file");
}

#[test]
fn two_class_composites_match_golden() {
    let scene = preset_scene(Preset::TwoClass, 128, 1).unwrap();
    let (tau, intensity) = generate_scene(&scene).unwrap();
    for (colormap, name) in [
        (Colormap::Viridis, "two_class_viridis.png"),
        (Colormap::Gray, "two_class_gray.png"),
    ] {
        let rgb = composite(
            &tau,
            &intensity,
            colormap,
            (0.0, 3.5),
            &ClaheConfig::default(),
        )
        .unwrap();
        compare(name, &encode_png(&rgb).unwrap());
    }
}
