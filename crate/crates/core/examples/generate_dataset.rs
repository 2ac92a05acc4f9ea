//! Generates the default synthetic crash-regime dataset and prints the
//! fitted seed parameters and the validation gates.
//!
//! `cargo run --release --example generate_dataset -- [out_dir]`

use artemis::dslob::{generate_dslob, write_dataset_dir, SyntheticDatasetSpec};

fn main() -> artemis::Result<()> {
    let spec = SyntheticDatasetSpec::default();
    let ds = generate_dslob(&spec)?;
    let m = &ds.manifest;
    println!("fitted Vasicek   {:?}", m.fitted.vasicek);
    println!("simulated        {:?}", m.fitted.vasicek_simulated);
    println!("fitted GARCH     {:?}", m.fitted.garch);
    println!("simulated        {:?}", m.fitted.garch_simulated);
    println!("noise ratio {:.4}, scale {:.4}", m.fitted.noise_ratio, m.fitted.noise_scale);
    for s in &m.splits {
        println!("{:5}: steps {:5}..{:5}, {} windows", s.name, s.start_step, s.end_step, s.windows);
    }
    let v = &m.validation;
    println!("KS p = {:.3e} ({})", v.ks_p, v.ks_pass);
    println!("ACF max dev {:.4} vs band {:.4} ({})", v.acf_max_dev, v.acf_band, v.acf_pass);
    println!("mean |Δcorr| {:.4} ({})", v.corr_mean_absdiff, v.corr_pass);
    println!("tail rel err {:.4} ({})", v.tail_rel_err, v.tail_pass);
    let t = &ds.train.targets;
    println!("train target range {:.3}..{:.3}", t.iter().cloned().fold(f64::INFINITY, f64::min), t.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if let Some(dir) = std::env::args().nth(1) {
        write_dataset_dir(std::path::Path::new(&dir), &ds)?;
        println!("wrote {dir}");
    }
    Ok(())
}
