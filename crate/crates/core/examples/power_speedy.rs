//! Frequentist sample sizes for the two SPEEDY outcomes, then a short
//! power curve for the continuous one.
//!
//! ```text
//! cargo run --example power_speedy
//! ```

use crt_assure::power::{
    power_continuous, sample_size_binary, sample_size_continuous, NConvention, PowerInputsBinary,
    PowerInputsContinuous, Sided,
};

fn main() -> crt_assure::Result<()> {
    let time = PowerInputsContinuous {
        delta: 30.0,
        sigma: 120.0,
        rho: 0.01,
        nu: 0.0,
        clusters: 150.0,
        nbar: f64::NAN,
        alpha: 0.05,
        sided: Sided::One,
    };
    let ss = sample_size_continuous(&time, 0.9)?;
    println!("time to thrombectomy: n = {} (nbar {}, power {:.4})", ss.total_n, ss.nbar, ss.power);

    let rate = PowerInputsBinary {
        p1: 0.132,
        p2: 0.216,
        rho: 0.01,
        clusters: 150.0,
        nbar: f64::NAN,
        alpha: 0.05,
        n_convention: NConvention::PerArm,
        sided: Sided::Two,
    };
    let ss = sample_size_binary(&rate, 0.9)?;
    println!("thrombectomy rate:    n = {} ({})", ss.total_n, ss.convention);

    println!("\nnbar  power");
    for nbar in [1.0, 2.0, 3.0, 4.0, 6.0, 8.0] {
        let p = power_continuous(&PowerInputsContinuous { nbar, ..time })?;
        println!("{nbar:>4}  {p:.3}");
    }
    Ok(())
}
