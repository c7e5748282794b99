//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::time::{Duration, Instant};

use rand::Rng;
use sia_cli::{
    cmd_bench, cmd_convert, cmd_run, cmd_synth, BenchArgs, ConvertArgs, CycleModelArg, NeuronArgs,
    RunArgs, SimArgs, SynthArgs,
};
use sia_core::convert::{convert_network, fold_batchnorm, to_fixed_point, ConvertOptions};
use sia_core::metrics::{argmax_lowest, SWEEP_KERNELS};
use sia_core::model_io::{decode_input, load_network, load_spikes};
use sia_core::network::{
    AnnLayerParams, AnnModel, BatchNorm, FracBits, InputSpec, LayerKind, WeightScale,
};
use sia_core::sim::{
    load_kernels, pe_convolve_window, pe_efficiency, peak_throughput, run_network_traced,
    CycleModel, MemoryMap, SiaConfig, SimError,
};
use sia_core::snn::{spike_count_oracle, FrameDims, QuantActParams};
use sia_core::synth::{margin_dataset, random_levels, rate_encode, rng, toy_ann, ToyNetSpec};
use sia_oracle::{brute_force_if_count, quantized_ann_forward, raw_batchnorm, reference_run};

type Outcome = Result<String, String>;

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    fn check(&mut self, name: &'static str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let over = start.elapsed() > budget;
        let line = match (&outcome, over) {
            (Ok(detail), false) => format!("PASS  {name}: {detail} [{secs:.3} s]"),
            (Ok(detail), true) => format!(
                "FAIL  {name}: {detail} [{secs:.3} s exceeds {:.0} s budget]",
                budget.as_secs_f64()
            ),
            (Err(why), _) => format!("FAIL  {name}: {why} [{secs:.3} s]"),
        };
        println!("{line}");
        if outcome.is_err() || over {
            self.failed.push(name);
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn throughput() -> Outcome {
    let cfg = SiaConfig::default();
    let peak = peak_throughput(&cfg);
    let per_pe = pe_efficiency(&cfg);
    ensure(peak == 38.4 && per_pe == 0.6, || {
        format!("peak {peak} GOPS, {per_pe} GOPS/PE")
    })?;
    Ok(format!("64 PE at 100 MHz: {peak} GOPS, {per_pe} GOPS/PE"))
}

fn asic_projection() -> Outcome {
    let cfg = SiaConfig {
        clock_hz: 500_000_000,
        ..SiaConfig::default()
    };
    let peak = peak_throughput(&cfg);
    ensure(peak == 192.0, || format!("{peak} GOPS at 500 MHz"))?;
    Ok(format!("{peak} GOPS at 500 MHz"))
}

fn conv_exactness() -> Outcome {
    let mut r = rng(0xC0);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let k = [1, 3, 5, 7, 11][r.gen_range(0..5)];
        let p = r.gen_range(0.0..1.0);
        let window: Vec<bool> = (0..k * k).map(|_| r.gen_bool(p)).collect();
        let kernel: Vec<i8> = (0..k * k).map(|_| r.gen()).collect();
        let (psum, _) = pe_convolve_window(&window, &kernel, CycleModel::RowParallel)
            .map_err(|e| e.to_string())?;
        let dot: i64 = window
            .iter()
            .zip(&kernel)
            .map(|(&s, &w)| s as i64 * w as i64)
            .sum();
        mismatches += (psum as i64 != dot) as usize;
    }
    ensure(mismatches == 0, || {
        format!("{mismatches} of 10000 windows differ")
    })?;
    Ok("10000 windows, k in {1,3,5,7,11}, 0 mismatches".into())
}

fn if_oracle() -> Outcome {
    let mut cases = 0;
    let mut mismatches = 0;
    for u0 in 0..=20i64 {
        for input in 0..=20i64 {
            for theta in 1..=20i64 {
                for t in 0..=16u32 {
                    let closed =
                        spike_count_oracle(u0, input, theta, t).map_err(|e| e.to_string())?;
                    mismatches += (closed != brute_force_if_count(u0, input, theta, t)) as usize;
                    cases += 1;
                }
            }
        }
    }
    ensure(mismatches == 0, || {
        format!("{mismatches} of {cases} grid points differ")
    })?;
    Ok(format!("{cases} grid points, 0 mismatches"))
}

fn batchnorm_fold() -> Outcome {
    let mut r = rng(0xB4);
    let mut worst_rel = 0.0f64;
    let mut bound_violations = 0;
    for _ in 0..10_000 {
        let bn = BatchNorm {
            gamma: vec![r.gen_range(-3.0..3.0)],
            beta: vec![r.gen_range(-3.0..3.0)],
            mean: vec![r.gen_range(-3.0..3.0)],
            var: vec![r.gen_range(0.0..4.0)],
            eps: r.gen_range(1e-6..1e-2),
        };
        let q_w = r.gen_range(1e-4..0.5);
        let y: i64 = r.gen_range(-20_000..20_000);
        let (g, h) =
            fold_batchnorm(&bn, WeightScale::new(q_w).unwrap()).map_err(|e| e.to_string())?;
        let folded = y as f64 * g[0] + h[0];
        let reference = raw_batchnorm(
            y as f64 * q_w,
            bn.gamma[0] as f64,
            bn.beta[0] as f64,
            bn.mean[0] as f64,
            bn.var[0] as f64,
            bn.eps as f64,
        );
        worst_rel =
            worst_rel.max((folded - reference).abs() / reference.abs().max(f64::MIN_POSITIVE));

        // Fixed-point path on the hardware-unit coefficient G / q_w with
        // fractional bits chosen so neither coefficient clips.
        let g_hw = g[0] / q_w;
        let fits = |x: f64| {
            (0..=15u8)
                .rev()
                .find(|&f| (x * (1u32 << f) as f64).abs() < 32767.0)
        };
        let (Some(fg), Some(fh)) = (fits(g_hw), fits(h[0])) else {
            continue;
        };
        let gx = to_fixed_point(&[g_hw], fg).map_err(|e| e.to_string())?;
        let hx = to_fixed_point(&[h[0]], fh).map_err(|e| e.to_string())?;
        let fixed = gx.values[0] as f64 * y as f64 / (1u32 << fg) as f64
            + hx.values[0] as f64 / (1u32 << fh) as f64;
        let exact = y as f64 * g_hw + h[0];
        let bound = y.abs() as f64 / (1u64 << (fg + 1)) as f64 + 1.0 / (1u64 << (fh + 1)) as f64;
        bound_violations += ((fixed - exact).abs() > bound * (1.0 + 1e-12)) as usize;
    }
    ensure(worst_rel < 1e-9, || {
        format!("worst relative error {worst_rel:e}")
    })?;
    ensure(bound_violations == 0, || {
        format!("{bound_violations} draws exceed the LSB bound")
    })?;
    Ok(format!(
        "10000 draws, worst relative error {worst_rel:.2e}, 0 LSB-bound violations"
    ))
}

/// Single fc or conv layer with dyadic parameters; see the conversion tests.
fn exact_layer(r: &mut impl Rng, levels: u32) -> AnnModel {
    let q_w = 1.0 / 64.0;
    let unit = q_w;
    let (dims, kind) = if r.gen_bool(0.5) {
        let c = r.gen_range(1..4);
        let out = r.gen_range(1..4);
        (FrameDims::new(c, 3, 3), LayerKind::conv(3, 1, c, out))
    } else {
        let n = r.gen_range(1..24);
        let out = r.gen_range(1..8);
        (FrameDims::new(n, 1, 1), LayerKind::fc(n, out))
    };
    let ch = kind.coeff_len();
    let theta = r.gen_range(1..64) as f64;
    let bn = BatchNorm {
        gamma: (0..ch).map(|_| r.gen_range(1..4) as f32).collect(),
        beta: (0..ch)
            .map(|_| (r.gen_range(-40..80) as f64 * unit) as f32)
            .collect(),
        mean: (0..ch)
            .map(|_| (r.gen_range(-20..20) as f64 * unit) as f32)
            .collect(),
        var: vec![1.0 - 1.0 / 1024.0; ch],
        eps: 1.0 / 1024.0,
    };
    AnnModel {
        input: InputSpec {
            dims,
            act: QuantActParams::new(levels, 1.0).unwrap(),
        },
        layers: vec![AnnLayerParams {
            name: "layer".into(),
            kind,
            weights: (0..kind.weight_len())
                .map(|_| (r.gen_range(-16..=16) as f64 * q_w) as f32)
                .collect(),
            bias: (0..ch)
                .map(|_| (r.gen_range(-5..=5) as f64 * unit) as f32)
                .collect(),
            batchnorm: Some(bn),
            act: Some(QuantActParams::new(levels, theta * unit).unwrap()),
            residual: None,
        }],
        scales: vec![WeightScale::new(q_w).unwrap()],
    }
}

fn single_layer_equivalence() -> Outcome {
    let mut r = rng(0x51);
    let mut summary = Vec::new();
    for levels in [1u32, 2, 4, 8, 16] {
        let (mut neurons, mut active, mut mismatches) = (0, 0, 0);
        while neurons < 1000 {
            let model = exact_layer(&mut r, levels);
            // |H| reaches 140 units here; 6 fractional bits keep it in range.
            let opts = ConvertOptions {
                timesteps: levels,
                frac: FracBits { g: 8, h: 6 },
                ..ConvertOptions::default()
            };
            let conv = convert_network(&model, &opts).map_err(|e| e.to_string())?;
            let clipped: usize = conv
                .report
                .iter()
                .map(|l| l.clipped_g + l.clipped_h + l.clipped_bias)
                .sum();
            ensure(clipped == 0, || {
                format!("L={levels}: {clipped} coefficients clipped")
            })?;
            let net = conv.network;
            let dims = model.input.dims;
            let input: Vec<u32> = (0..dims.len())
                .map(|_| if r.gen_bool(0.6) { levels } else { 0 })
                .collect();
            let frames = rate_encode(&input, dims, levels, levels as usize);
            let trace = run_network_traced(&net, &frames, &SiaConfig::default())
                .map_err(|e| e.to_string())?;
            let acts = quantized_ann_forward(&model, &input);
            let step = model.layers[0].act.unwrap().step;
            for (n, &count) in trace.layers[0]
                .spike_counts
                .iter()
                .take(1000 - neurons)
                .enumerate()
            {
                let level = (acts[0][n] * levels as f64 / step).round() as u32;
                mismatches += (count != level) as usize;
                active += (level > 0) as usize;
                neurons += 1;
            }
        }
        ensure(mismatches == 0, || {
            format!("L={levels}: {mismatches} of 1000 neurons differ")
        })?;
        summary.push(format!("L={levels}: {active} active"));
    }
    Ok(format!(
        "1000 neurons per L, 0 mismatches ({})",
        summary.join(", ")
    ))
}

fn end_to_end() -> Outcome {
    let ts = [2usize, 4, 8, 16];
    let mut mean = [0.0f64; 4];
    let (mut agree, mut total) = (0, 0);
    for seed in 0..10 {
        let spec = ToyNetSpec {
            seed,
            ..ToyNetSpec::default()
        };
        let ann = toy_ann(&spec);
        let net = convert_network(&ann, &ConvertOptions::default())
            .map_err(|e| e.to_string())?
            .network;
        let mut r = rng(seed ^ 0xE2E);
        for (j, &t) in ts.iter().enumerate() {
            let (mut err, mut n) = (0.0, 0usize);
            for _ in 0..16 {
                let levels = random_levels(&mut r, spec.input, spec.levels);
                let acts = quantized_ann_forward(&ann, &levels);
                let frames = rate_encode(&levels, spec.input, spec.levels, t);
                let trace = run_network_traced(&net, &frames, &SiaConfig::default())
                    .map_err(|e| e.to_string())?;
                for (l, layer) in trace.layers.iter().enumerate() {
                    let step = ann.layers[l].act.unwrap().step;
                    for (i, &c) in layer.spike_counts.iter().enumerate() {
                        err += (c as f64 / t as f64 - acts[l][i] / step).abs();
                        n += 1;
                    }
                }
            }
            mean[j] += err / n as f64 / 10.0;
        }
        for d in margin_dataset(&ann, 20, spec.levels as f64 / 2.0, 16, seed + 100) {
            let trace = run_network_traced(&net, &d.frames, &SiaConfig::default())
                .map_err(|e| e.to_string())?;
            agree += (argmax_lowest(&trace.run.output_counts) == Some(d.label)) as usize;
            total += 1;
        }
    }
    let curve = format!(
        "mean rate error at T=2,4,8,16: {:.4}, {:.4}, {:.4}, {:.4}",
        mean[0], mean[1], mean[2], mean[3]
    );
    ensure(mean.windows(2).all(|w| w[1] <= w[0]), || {
        format!("{curve} is not nonincreasing")
    })?;
    ensure(total == 200 && agree == total, || {
        format!("{curve}; argmax agreement {agree}/{total}")
    })?;
    Ok(format!("{curve}; argmax agreement at T=16 {agree}/{total}"))
}

fn sim_args() -> SimArgs {
    SimArgs {
        clock: 100_000_000,
        no_transfer: false,
        overlap: false,
        cycle_model: CycleModelArg::RowParallel,
        neuron: NeuronArgs {
            mode: None,
            leak_shift: 4,
        },
    }
}

fn pingpong_strict() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    let synth = cmd_synth(
        &SynthArgs {
            seed: 0,
            timesteps: 16,
            margin: 8.0,
            name: "toy".into(),
        },
        out,
    )
    .map_err(|e| e.to_string())?;
    let convert = cmd_convert(
        &ConvertArgs {
            ann: synth.ann.clone(),
            out: "net".into(),
            timesteps: 16,
            frac_g: 8,
            frac_h: 8,
            neuron: NeuronArgs {
                mode: None,
                leak_shift: 4,
            },
        },
        out,
    )
    .map_err(|e| e.to_string())?;
    let run_args = RunArgs {
        net: convert.manifest.clone(),
        spikes: synth.spikes.clone(),
        timesteps: None,
        sim: sim_args(),
    };
    let report = cmd_run(&run_args, out, true).map_err(|e| format!("strict run failed: {e}"))?;
    let inv = report.invariants;

    // The bank round trip is lossless if the run reproduces a reference
    // that keeps membranes in plain per-layer arrays.
    let net = load_network(&convert.manifest).map_err(|e| e.to_string())?;
    let frames = decode_input(&load_spikes(&synth.spikes).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let reference = reference_run(&net, &frames);
    let trace =
        run_network_traced(&net, &frames, &SiaConfig::default()).map_err(|e| e.to_string())?;
    let membranes_match = trace
        .layers
        .iter()
        .zip(&reference.final_membrane)
        .all(|(t, r)| {
            t.final_membrane
                .iter()
                .map(|&u| u as i64)
                .eq(r.iter().copied())
        });
    ensure(
        inv.bank_conflicts == 0 && inv.continuity_mismatches == 0,
        || format!("{inv:?}"),
    )?;
    ensure(trace.run.ticks >= 16 * net.layers.len() as u64, || {
        format!("only {} bank ticks", trace.run.ticks)
    })?;
    ensure(
        membranes_match && &report.output_counts == reference.counts.last().unwrap(),
        || "membrane state differs from the reference".into(),
    )?;
    Ok(format!(
        "T=16, {} bank ticks, 0 conflicts, 0 continuity mismatches, membranes match reference, class {:?} (label {})",
        trace.run.ticks, report.predicted_class, synth.label
    ))
}

fn kernel_ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let args = BenchArgs {
        k: SWEEP_KERNELS.to_vec(),
        timesteps: 1,
        seed: 0,
        sim: sim_args(),
    };
    let rows = cmd_bench(&args, dir.path()).map_err(|e| e.to_string())?;
    let cycles: Vec<u64> = rows.iter().map(|r| r.cycles).collect();
    ensure(
        rows.len() == 4 && cycles.windows(2).all(|w| w[0] <= w[1]),
        || format!("cycles {cycles:?}"),
    )?;
    let bad = BenchArgs { k: vec![4], ..args };
    ensure(
        cmd_bench(&bad, dir.path()).map_err(|e| e.exit_code()) == Err(2),
        || "--k 4 was accepted".into(),
    )?;
    Ok(format!("k=3,5,7,11 cycles {cycles:?}; k=4 rejected"))
}

fn memory_map() -> Outcome {
    let mem = MemoryMap::default();
    let k3 = [0i8; 9];
    let too_many: Vec<&[i8]> = (0..65).map(|_| &k3[..]).collect();
    let big = [0i8; 129];
    let many = load_kernels(&too_many, &mem);
    let large = load_kernels(&[&big[..]], &mem);
    let fits: Vec<&[i8]> = (0..64).map(|_| &k3[..]).collect();
    ensure(matches!(many, Err(SimError::WeightSlots { .. })), || {
        format!("65 kernels: {many:?}")
    })?;
    ensure(
        matches!(large, Err(SimError::KernelTooLarge { .. })),
        || format!("129 B kernel: {large:?}"),
    )?;
    ensure(load_kernels(&fits, &mem).is_ok(), || {
        "64 kernels rejected".into()
    })?;
    Ok(format!("{}; {}", many.unwrap_err(), large.unwrap_err()))
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    let s = Duration::from_secs;
    suite.check("throughput arithmetic", s(1), throughput);
    suite.check("ASIC projection arithmetic", s(1), asic_projection);
    suite.check("spiking-conv exactness", s(10), conv_exactness);
    suite.check("IF oracle equivalence", s(10), if_oracle);
    suite.check("batchnorm fold identity", s(5), batchnorm_fold);
    suite.check(
        "single-layer conversion equivalence",
        s(10),
        single_layer_equivalence,
    );
    suite.check("end-to-end desk-scale network", s(60), end_to_end);
    suite.check("ping-pong protocol under --strict", s(30), pingpong_strict);
    suite.check("kernel-size latency ordering", s(60), kernel_ordering);
    suite.check("memory-map enforcement", s(1), memory_map);
    if suite.failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!(
            "acceptance: {} failing: {}",
            suite.failed.len(),
            suite.failed.join(", ")
        );
        std::process::exit(1);
    }
}
