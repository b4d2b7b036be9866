//! End-to-end 3D path: masked NCC registration of a known translation on
//! synthetic volumes, exercised through the same commands the lung-CT
//! workflow uses (register, eval tre, eval audit).

use std::fs;
use std::path::{Path, PathBuf};

use eqgap::image::{save_metaimage, ElementType, Image};
use eqgap_cli::{run_eval_audit, run_register, AuditArgs, RegisterArgs, TreArgs};

/// Smooth scalar volume sampled from an analytic function so the moving
/// image can be produced by exact resampling under a known translation.
fn volume(dims: [usize; 3], spacing: [f64; 3], shift_world: [f64; 3]) -> Image<3> {
    let mut voxels = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let x = i as f64 * spacing[0] - shift_world[0];
                let y = j as f64 * spacing[1] - shift_world[1];
                let z = k as f64 * spacing[2] - shift_world[2];
                let v = (0.35 * x).sin() * (0.3 * y).cos() + (0.22 * (y + z)).sin()
                    - 0.4 * (0.18 * (x - z)).cos();
                voxels.push(v);
            }
        }
    }
    Image::new(dims, spacing, [0.0, 0.0, 0.0], voxels)
}

fn interior_mask(dims: [usize; 3], margin: usize) -> Image<3> {
    let mut voxels = vec![0.0; dims.iter().product()];
    for k in margin..dims[2] - margin {
        for j in margin..dims[1] - margin {
            for i in margin..dims[0] - margin {
                voxels[i + dims[0] * (j + dims[1] * k)] = 1.0;
            }
        }
    }
    Image::new(dims, [1.0; 3], [0.0; 3], voxels)
}

fn write_landmarks(path: &Path, points: &[[f64; 3]]) {
    let mut text = String::new();
    for p in points {
        // 1-based on disk
        text.push_str(&format!("{} {} {}\n", p[0] + 1.0, p[1] + 1.0, p[2] + 1.0));
    }
    fs::write(path, text).unwrap();
}

fn parse_tre_mean(dir: &Path) -> f64 {
    let text = fs::read_to_string(dir.join("tre.csv")).unwrap();
    let line = text.lines().find(|l| l.starts_with("mean,")).unwrap();
    line.split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn masked_ncc_translation_recovery() {
    let root = tempfile::tempdir().unwrap();
    let dims = [36, 36, 24];
    let spacing = [1.0, 1.0, 1.8];

    // moving is the fixed anatomy shifted by exactly 2 voxels in x and
    // 1 slice in z
    let shift_vox = [2.0, 0.0, 1.0];
    let shift_world = [
        shift_vox[0] * spacing[0],
        shift_vox[1] * spacing[1],
        shift_vox[2] * spacing[2],
    ];
    let fixed = volume(dims, spacing, [0.0; 3]);
    let moving = volume(dims, spacing, shift_world);
    let mask = interior_mask(dims, 5);
    let mut mask_img = mask.clone();
    mask_img.spacing = spacing;

    let fixed_path = root.path().join("fixed.mhd");
    let moving_path = root.path().join("moving.mhd");
    let mask_path = root.path().join("mask.mhd");
    save_metaimage(&fixed, &fixed_path, ElementType::Float).unwrap();
    save_metaimage(&moving, &moving_path, ElementType::Float).unwrap();
    save_metaimage(&mask_img, &mask_path, ElementType::Uchar).unwrap();

    let cfg = root.path().join("run.cfg");
    fs::write(
        &cfg,
        "beta = 0.001\nsimilarity = ncc\nregularizer = physics\nbatch_size = 3000\n\
         iterations = 300\nlearning_rate = 0.0003\nseed = 41\n",
    )
    .unwrap();

    let out = root.path().join("run");
    run_register(&RegisterArgs {
        fixed: fixed_path.clone(),
        moving: moving_path.clone(),
        mask: Some(mask_path),
        config: cfg,
        out: out.clone(),
    })
    .unwrap();

    // landmarks well inside the mask, paired through the known shift
    let fixed_pts: Vec<[f64; 3]> = vec![
        [12.0, 12.0, 8.0],
        [18.0, 20.0, 12.0],
        [24.0, 14.0, 10.0],
        [15.0, 24.0, 14.0],
        [21.0, 17.0, 9.0],
    ];
    let moving_pts: Vec<[f64; 3]> = fixed_pts
        .iter()
        .map(|p| [p[0] + shift_vox[0], p[1] + shift_vox[1], p[2] + shift_vox[2]])
        .collect();
    let flm = root.path().join("flm.txt");
    let mlm = root.path().join("mlm.txt");
    write_landmarks(&flm, &fixed_pts);
    write_landmarks(&mlm, &moving_pts);

    // TRE of the zero field = the shift magnitude (2.69 mm here)
    let baseline = {
        let zero_out = root.path().join("zero");
        let zero_cfg = root.path().join("zero.cfg");
        fs::write(
            &zero_cfg,
            "beta = 1\nregularizer = physics\nbatch_size = 200\niterations = 1\nseed = 1\n",
        )
        .unwrap();
        run_register(&RegisterArgs {
            fixed: fixed_path.clone(),
            moving: moving_path.clone(),
            mask: None,
            config: zero_cfg,
            out: zero_out.clone(),
        })
        .unwrap();
        eqgap_cli::run_eval(&eqgap_cli::EvalCommand::Tre(TreArgs {
            field: zero_out.join("field.eqgf"),
            fixed: fixed_path.clone(),
            fixed_landmarks: flm.clone(),
            moving_landmarks: mlm.clone(),
            out: root.path().join("tre_zero"),
        }))
        .unwrap();
        parse_tre_mean(&root.path().join("tre_zero"))
    };
    let expected_shift_mm = (shift_world[0].powi(2) + shift_world[2].powi(2)).sqrt();
    assert!((baseline - expected_shift_mm).abs() < 0.3, "baseline {baseline}");

    eqgap_cli::run_eval(&eqgap_cli::EvalCommand::Tre(TreArgs {
        field: out.join("field.eqgf"),
        fixed: fixed_path.clone(),
        fixed_landmarks: flm,
        moving_landmarks: mlm,
        out: root.path().join("tre"),
    }))
    .unwrap();
    let tre = parse_tre_mean(&root.path().join("tre"));
    assert!(
        tre < 0.5 * baseline,
        "3D registration did not recover the shift: TRE {tre:.3} vs baseline {baseline:.3}"
    );

    // the recovered transformation stays invertible on the 3D audit lattice
    let audit = run_eval_audit(&AuditArgs {
        field: out.join("field.eqgf"),
        fixed: fixed_path,
        resolution: Some(24),
        gate: true,
        out: None,
    })
    .unwrap();
    assert!(audit.min_j > 0.0);
}

#[test]
fn register_3d_runs_deterministically() {
    let root = tempfile::tempdir().unwrap();
    let dims = [20, 20, 12];
    let fixed = volume(dims, [1.0, 1.0, 2.0], [0.0; 3]);
    let moving = volume(dims, [1.0, 1.0, 2.0], [0.7, -0.4, 0.9]);
    let fixed_path = root.path().join("fixed.mhd");
    let moving_path = root.path().join("moving.mhd");
    save_metaimage(&fixed, &fixed_path, ElementType::Float).unwrap();
    save_metaimage(&moving, &moving_path, ElementType::Float).unwrap();
    let cfg = root.path().join("run.cfg");
    fs::write(
        &cfg,
        "beta = 0.01\nsimilarity = mse\nregularizer = bending\nbatch_size = 500\n\
         iterations = 20\nlearning_rate = 0.0002\nseed = 6\n",
    )
    .unwrap();
    let mut fields: Vec<Vec<u8>> = Vec::new();
    for run in ["a", "b"] {
        let out = root.path().join(run);
        run_register(&RegisterArgs {
            fixed: fixed_path.clone(),
            moving: moving_path.clone(),
            mask: None,
            config: cfg.clone(),
            out: out.clone(),
        })
        .unwrap();
        fields.push(fs::read(out.join("field.eqgf")).unwrap());
    }
    assert_eq!(fields[0], fields[1]);
}

#[test]
fn field_dimension_mismatch_rejected() {
    let root = tempfile::tempdir().unwrap();
    let dims = [20, 20, 12];
    let fixed3 = volume(dims, [1.0, 1.0, 2.0], [0.0; 3]);
    let fixed3_path = root.path().join("fixed3.mhd");
    save_metaimage(&fixed3, &fixed3_path, ElementType::Float).unwrap();

    // a 2D field against a 3D image must be a config error
    let grid = eqgap::field::ControlGrid::<2>::for_domain([0.0, 0.0], [1.0, 1.0], 0.25).unwrap();
    let field_path: PathBuf = root.path().join("field2d.eqgf");
    eqgap::field::write_eqgf(&grid, &field_path).unwrap();
    let err = run_eval_audit(&AuditArgs {
        field: field_path,
        fixed: fixed3_path,
        resolution: Some(8),
        gate: false,
        out: None,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
