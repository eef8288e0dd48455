//! Built-in manifests. `manifests/*.toml` in the repository are generated from these.

use super::manifest::{ArchitectureManifest, LayerKind, LayerSpec, SCHEMA_VERSION, INPUT};

fn conv(id: &str, input: &str, cin: usize, cout: usize, k: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        inputs: vec![input.into()],
        in_channels: cin,
        out_channels: cout,
        kernel: Some([k, k]),
        stride,
        padding: k / 2,
        adaptable: true,
        prunable: true,
        ..LayerSpec::new(id, LayerKind::Conv2d)
    }
}

fn pass(id: &str, kind: LayerKind, inputs: &[&str], channels: usize) -> LayerSpec {
    LayerSpec {
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        in_channels: channels,
        out_channels: channels,
        ..LayerSpec::new(id, kind)
    }
}

fn head(input: &str, cin: usize, classes: usize) -> LayerSpec {
    LayerSpec {
        inputs: vec![input.into()],
        in_channels: cin,
        out_channels: classes,
        ..LayerSpec::new("head", LayerKind::Head)
    }
}

fn finish(name: &str, input_shape: Vec<usize>, num_classes: usize, layers: Vec<LayerSpec>, groups: Vec<Vec<String>>) -> ArchitectureManifest {
    ArchitectureManifest {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        input_shape,
        num_classes,
        residual_groups: groups,
        layers,
    }
    .normalized()
    .expect("built-in manifest is valid")
}

/// Two-conv residual block. Returns the id of the block output.
fn basic_block(layers: &mut Vec<LayerSpec>, group: &mut Vec<String>, name: &str, input: &str, cin: usize, cout: usize, stride: usize) -> String {
    let id = |s: &str| format!("{name}.{s}");
    layers.push(conv(&id("conv1"), input, cin, cout, 3, stride));
    layers.push(pass(&id("bn1"), LayerKind::Batchnorm, &[&id("conv1")], cout));
    layers.push(pass(&id("relu1"), LayerKind::Relu, &[&id("bn1")], cout));
    layers.push(conv(&id("conv2"), &id("relu1"), cout, cout, 3, 1));
    layers.push(pass(&id("bn2"), LayerKind::Batchnorm, &[&id("conv2")], cout));
    group.push(id("conv2"));
    let shortcut = if stride != 1 || cin != cout {
        layers.push(conv(&id("down"), input, cin, cout, 1, stride));
        layers.push(pass(&id("down_bn"), LayerKind::Batchnorm, &[&id("down")], cout));
        group.push(id("down"));
        id("down_bn")
    } else {
        input.to_string()
    };
    layers.push(pass(&id("add"), LayerKind::Add, &[&id("bn2"), &shortcut], cout));
    layers.push(pass(&id("out"), LayerKind::Relu, &[&id("add")], cout));
    id("out")
}

/// Small residual CNN for 3×16×16 inputs: a stem, four basic blocks
/// (16, 16→32 stride 2, 32, 32→64 stride 2), pooling, and a head.
pub fn desk_cnn() -> ArchitectureManifest {
    desk_cnn_for(10)
}

pub fn desk_cnn_for(num_classes: usize) -> ArchitectureManifest {
    let mut layers = vec![
        conv("stem.conv", INPUT, 3, 16, 3, 1),
        pass("stem.bn", LayerKind::Batchnorm, &["stem.conv"], 16),
        pass("stem.relu", LayerKind::Relu, &["stem.bn"], 16),
    ];
    let mut groups = vec![vec!["stem.conv".to_string()], vec![], vec![]];
    let x = basic_block(&mut layers, &mut groups[0], "b1", "stem.relu", 16, 16, 1);
    let x = basic_block(&mut layers, &mut groups[1], "b2", &x, 16, 32, 2);
    let x = basic_block(&mut layers, &mut groups[1], "b3", &x, 32, 32, 1);
    let x = basic_block(&mut layers, &mut groups[2], "b4", &x, 32, 64, 2);
    layers.push(pass("pool", LayerKind::Pool, &[&x], 64));
    layers.push(head("pool", 64, num_classes));
    finish("desk-cnn", vec![3, 16, 16], num_classes, layers, groups)
}

/// ResNet-50 with a 3×3 stride-1 stem and no stem pooling, for 32×32 inputs.
pub fn resnet50(num_classes: usize) -> ArchitectureManifest {
    let mut layers = vec![
        conv("stem.conv", INPUT, 3, 64, 3, 1),
        pass("stem.bn", LayerKind::Batchnorm, &["stem.conv"], 64),
        pass("stem.relu", LayerKind::Relu, &["stem.bn"], 64),
    ];
    let mut groups = vec![];
    let mut x = "stem.relu".to_string();
    let mut cin = 64;
    for (s, (&blocks, &width)) in [3, 4, 6, 3].iter().zip(&[64, 128, 256, 512]).enumerate() {
        let cout = width * 4;
        let mut group = vec![];
        for b in 0..blocks {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let name = format!("l{}.{b}", s + 1);
            let id = |t: &str| format!("{name}.{t}");
            layers.push(conv(&id("conv1"), &x, cin, width, 1, 1));
            layers.push(pass(&id("bn1"), LayerKind::Batchnorm, &[&id("conv1")], width));
            layers.push(pass(&id("relu1"), LayerKind::Relu, &[&id("bn1")], width));
            layers.push(conv(&id("conv2"), &id("relu1"), width, width, 3, stride));
            layers.push(pass(&id("bn2"), LayerKind::Batchnorm, &[&id("conv2")], width));
            layers.push(pass(&id("relu2"), LayerKind::Relu, &[&id("bn2")], width));
            layers.push(conv(&id("conv3"), &id("relu2"), width, cout, 1, 1));
            layers.push(pass(&id("bn3"), LayerKind::Batchnorm, &[&id("conv3")], cout));
            group.push(id("conv3"));
            let shortcut = if b == 0 {
                layers.push(conv(&id("down"), &x, cin, cout, 1, stride));
                layers.push(pass(&id("down_bn"), LayerKind::Batchnorm, &[&id("down")], cout));
                group.push(id("down"));
                id("down_bn")
            } else {
                x.clone()
            };
            layers.push(pass(&id("add"), LayerKind::Add, &[&id("bn3"), &shortcut], cout));
            layers.push(pass(&id("out"), LayerKind::Relu, &[&id("add")], cout));
            x = id("out");
            cin = cout;
        }
        groups.push(group);
    }
    layers.push(pass("pool", LayerKind::Pool, &[&x], cin));
    layers.push(head("pool", cin, num_classes));
    finish("resnet50", vec![3, 32, 32], num_classes, layers, groups)
}

/// Fully connected network: `dims[0]` inputs, one adaptable, prunable linear
/// layer plus ReLU per further entry, then the head.
pub fn mlp(dims: &[usize], num_classes: usize) -> ArchitectureManifest {
    assert!(!dims.is_empty());
    let mut layers = vec![];
    let mut prev = INPUT.to_string();
    for (i, w) in dims.windows(2).enumerate() {
        let fc = format!("fc{}", i + 1);
        layers.push(LayerSpec {
            inputs: vec![prev.clone()],
            in_channels: w[0],
            out_channels: w[1],
            adaptable: true,
            prunable: true,
            ..LayerSpec::new(&fc, LayerKind::Linear)
        });
        prev = format!("relu{}", i + 1);
        layers.push(pass(&prev, LayerKind::Relu, &[&fc], w[1]));
    }
    layers.push(head(&prev, *dims.last().unwrap(), num_classes));
    finish("mlp", vec![dims[0]], num_classes, layers, vec![])
}

pub fn by_name(name: &str) -> Option<ArchitectureManifest> {
    match name {
        "desk-cnn" => Some(desk_cnn()),
        "resnet50" => Some(resnet50(10)),
        "mlp" => Some(mlp(&[4, 8], 2)),
        _ => None,
    }
}
