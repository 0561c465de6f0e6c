//! Saves a classifier to the binary checkpoint container and reads it back.

use causaladv::checkpoint::{load_classifier, save_classifier, CheckpointMeta};
use causaladv::models::{build_classifier, Classifier, NetworkSpec};
use causaladv::Result;

fn main() -> Result<()> {
    let model: Classifier<f32> = build_classifier(NetworkSpec::mnist_desk(), 3)?;
    let path = std::env::temp_dir().join("cadv-example.cadv");
    let meta = CheckpointMeta {
        kind: "init".into(),
        epoch: 0,
        robust_val_acc: None,
        natural_val_acc: None,
        precision: "f32".into(),
    };
    save_classifier(&path, &model, &meta)?;
    let (back, meta) = load_classifier::<f32>(&path)?;
    println!("{} parameters, kind {}, identical: {}", back.num_params(), meta.kind, back == model);
    println!("{} bytes at {}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), path.display());
    Ok(())
}
