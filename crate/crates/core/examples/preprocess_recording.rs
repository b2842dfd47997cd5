//! Standardize a raw recording into the 20-channel bipolar montage and crop it.

use elmkit::eegprep::{band_power, crop, preprocess, Montage, TARGET_RATE};
use elmkit::synth::{subject_traits, synth_signal, SynthSpec};

fn main() -> elmkit::Result<()> {
    let spec = SynthSpec { duration_s: 100.0, ..SynthSpec::default() };
    let (raw, _) = synth_signal(&spec, &subject_traits(&spec, 0), 0, 0);
    println!("raw: {} channels at {} Hz, {:.0} s", raw.channels, raw.sampling_rate, raw.duration_s());

    let montage = Montage::tcp();
    let sig = preprocess(&raw, &montage)?;
    println!("standardized: {} channels at {TARGET_RATE} Hz, {:.0} s", sig.channels.len(), sig.duration_s());
    let peak = sig.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    println!("peak amplitude {peak:.1} uV");
    for (c, name) in sig.channels.iter().enumerate().take(4) {
        let alpha = band_power(sig.channel(c), TARGET_RATE, 8.0, 13.0);
        let delta = band_power(sig.channel(c), TARGET_RATE, 0.5, 4.0);
        println!("  {name:<8} alpha/delta power ratio {:.2}", alpha / delta);
    }

    for seconds in [5.0, 30.0, 60.0] {
        let crops = crop(&sig, seconds, None)?;
        println!("{seconds:>4} s crops: {} x [{} x {}]", crops.len(), crops[0].channels, crops[0].len);
    }
    Ok(())
}
