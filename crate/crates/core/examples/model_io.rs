//! Builds a model, predicts, saves it, loads it back, and checks that the
//! predictions are unchanged.

use tfda::data::{generate_synthetic, ShiftSpec};
use tfda::model::{build_model, load_model, predict_labels, save_model, Arch, Fusion};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arch = Arch {
        widths: [4, 8, 8],
        proj_hidden: 8,
        proj_dim: 8,
        ..Arch::new(2, 128, 3)
    };
    let model = build_model(&arch, 3)?;
    let ds = generate_synthetic(3, 2, 128, 4, &ShiftSpec::identity(), 0)?;
    let before = predict_labels(&model, &ds, Fusion::Confidence)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.bin");
    save_model(&model, &path)?;
    let loaded = load_model(&path)?;
    let after = predict_labels(&loaded, &ds, Fusion::Confidence)?;

    println!("{} parameters, predictions equal: {}", model.params.numel(), before == after);
    Ok(())
}
