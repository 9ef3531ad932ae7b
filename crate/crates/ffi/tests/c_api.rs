use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use cods_core::descriptor::{DescriptorNet, DescriptorNetConfig, InputScaling};
use cods_core::nn::BackboneConfig;
use cods_ffi::*;

fn last_error() -> String {
    let p = cods_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cods_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn environment_episode_through_the_c_api() {
    unsafe {
        let mut env = ptr::null_mut();
        assert_eq!(cods_env_new(ptr::null(), &mut env), CodsStatus::Ok);
        let mut result = CodsStepResult {
            reward: 0.0,
            done: false,
            kind: CodsPickKind::Miss,
            picked_id: 0,
            remaining: 0,
        };
        assert_eq!(cods_env_step(env, 0, 0, &mut result), CodsStatus::Contract);
        assert!(last_error().contains("reset"));

        let (mut w, mut h) = (0u32, 0u32);
        assert_eq!(cods_env_reset(env, 7, &mut w, &mut h), CodsStatus::Ok);
        let n = (w * h) as usize;
        let mut depth = vec![0f32; n];
        assert_eq!(cods_env_depth(env, depth.as_mut_ptr(), n), CodsStatus::Ok);
        assert!(depth.iter().any(|d| *d > 0.0));
        let mut rgb = vec![0u8; 3 * n];
        assert_eq!(
            cods_env_rgb(env, rgb.as_mut_ptr(), 3 * n - 1),
            CodsStatus::InvalidArgument
        );
        assert_eq!(cods_env_rgb(env, rgb.as_mut_ptr(), 3 * n), CodsStatus::Ok);
        let mut mask = vec![0u8; n];
        assert_eq!(cods_env_action_mask(env, ptr::null_mut(), n), CodsStatus::NullPointer);
        assert_eq!(cods_env_action_mask(env, mask.as_mut_ptr(), n), CodsStatus::Ok);

        assert_eq!(cods_env_step(env, -1, 0, &mut result), CodsStatus::Domain);
        let mut steps = 0;
        while !result.done {
            let i = mask.iter().position(|m| *m == 1).expect("a valid pixel");
            assert_eq!(
                cods_env_step(env, (i % w as usize) as i32, (i / w as usize) as i32, &mut result),
                CodsStatus::Ok
            );
            assert_eq!(cods_env_action_mask(env, mask.as_mut_ptr(), n), CodsStatus::Ok);
            steps += 1;
        }
        assert!(steps <= 10);
        assert_eq!(cods_env_step(env, 0, 0, &mut result), CodsStatus::Contract);
        cods_env_free(env);
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    unsafe {
        let mut env = ptr::null_mut();
        let bad = CString::new("{\"object_count\": 1, \"nope\": 2}").unwrap();
        assert_eq!(cods_env_new(bad.as_ptr(), &mut env), CodsStatus::Config);
        assert!(env.is_null());
        assert_eq!(cods_env_new(ptr::null(), ptr::null_mut()), CodsStatus::NullPointer);
        assert_eq!(
            cods_env_reset(ptr::null_mut(), 0, ptr::null_mut(), ptr::null_mut()),
            CodsStatus::NullPointer
        );
        let mut desc = ptr::null_mut();
        let missing = CString::new("/nonexistent/descriptor.safetensors").unwrap();
        assert_eq!(cods_descriptor_load(missing.as_ptr(), &mut desc), CodsStatus::Io);
        assert_eq!(cods_descriptor_dim(ptr::null()), 0);
        cods_env_free(ptr::null_mut());
        cods_descriptor_free(ptr::null_mut());
    }
}

#[test]
fn descriptor_handle_describes_observations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.safetensors");
    let cfg = DescriptorNetConfig {
        backbone: BackboneConfig {
            stem_width: 4,
            widths: [4, 8, 8, 8],
            blocks: [1, 1, 1, 1],
        },
        ..DescriptorNetConfig::desk()
    };
    let net = DescriptorNet::new(
        cfg,
        InputScaling {
            depth_mean: 0.45,
            depth_std: 0.05,
        },
        3,
    )
    .unwrap();
    net.save(&path, &Default::default()).unwrap();
    unsafe {
        let mut desc = ptr::null_mut();
        let p = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(cods_descriptor_load(p.as_ptr(), &mut desc), CodsStatus::Ok);
        let dim = cods_descriptor_dim(desc) as usize;
        assert_eq!(dim, 8);
        let mut env = ptr::null_mut();
        assert_eq!(cods_env_new(ptr::null(), &mut env), CodsStatus::Ok);
        let mut out = vec![0f32; 8];
        assert_eq!(
            cods_descriptor_describe(desc, env, out.as_mut_ptr(), out.len()),
            CodsStatus::Contract
        );
        let (mut w, mut h) = (0u32, 0u32);
        assert_eq!(cods_env_reset(env, 1, &mut w, &mut h), CodsStatus::Ok);
        let mut out = vec![f32::NAN; (w * h) as usize * dim];
        assert_eq!(
            cods_descriptor_describe(desc, env, out.as_mut_ptr(), out.len()),
            CodsStatus::Ok
        );
        assert!(out.iter().all(|v| v.is_finite()));
        cods_env_free(env);
        cods_descriptor_free(desc);
    }
}

#[test]
fn generated_header_compiles_as_c_and_cpp() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = format!("{include}/cods.h");
    assert!(std::path::Path::new(&header).exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"cods.h\"\nint main(void) {\n  CodsEnv *env = 0;\n  CodsStepResult r;\n  if (cods_env_new(0, &env) != CODS_STATUS_OK) return 1;\n  cods_env_step(env, 1, 2, &r);\n  cods_env_free(env);\n  return r.kind == CODS_PICK_KIND_SUCCESS;\n}\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", vec!["-std=c11"]), ("c++", vec!["-x", "c++"])] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
            .args(&extra)
            .arg(&src)
            .output()
            .expect("C compiler available");
        assert!(
            out.status.success(),
            "{compiler}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
