//! Layer graphs for the supported architectures.
//!
//! Parameter keys follow the torchvision `state_dict` naming so exported
//! checkpoints load without renaming. Node names are the conventional layer
//! labels (`conv5_4`, `pool5`, `layer4.1`, ...); a ReLU after a convolution
//! is its own node, named `relu<block>_<k>`.

use super::layers::{AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Linear, MaxPool2d};
use super::network::{BasicBlock, Layer, Network};
use crate::error::{Error, Result};

/// Builds the untrained graph for a registry `builder` name.
pub fn build(builder: &str, num_classes: usize) -> Result<Network> {
    match builder {
        "vgg19" => Ok(vgg19(num_classes)),
        "alexnet" => Ok(alexnet(num_classes)),
        "resnet18" => Ok(resnet18(num_classes)),
        "toy" => Ok(toy(num_classes)),
        other => {
            Err(Error::config(format!("unknown network builder '{other}' (known: vgg19, alexnet, resnet18, toy)")))
        }
    }
}

fn pool(kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::MaxPool(MaxPool2d { kernel, stride, padding })
}

pub fn vgg19(num_classes: usize) -> Network {
    const BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
    let mut net = Network::new();
    let mut idx = 0;
    let mut in_ch = 3;
    for (b, &(ch, reps)) in BLOCKS.iter().enumerate() {
        for k in 0..reps {
            let name = format!("conv{}_{}", b + 1, k + 1);
            net.push_param(&name, format!("features.{idx}"), Layer::Conv(Conv2d::zeros(ch, in_ch, 3, 1, 1)));
            net.push(format!("relu{}_{}", b + 1, k + 1), Layer::Relu);
            idx += 2;
            in_ch = ch;
        }
        net.push(format!("pool{}", b + 1), pool(2, 2, 0));
        idx += 1;
    }
    net.push("avgpool", Layer::AdaptiveAvgPool(AdaptiveAvgPool2d { out_h: 7, out_w: 7 }))
        .push("flatten", Layer::Flatten)
        .push_param("fc6", "classifier.0", Layer::Linear(Linear::zeros(4096, 512 * 7 * 7)))
        .push("relu6", Layer::Relu)
        .push("drop6", Layer::Dropout)
        .push_param("fc7", "classifier.3", Layer::Linear(Linear::zeros(4096, 4096)))
        .push("relu7", Layer::Relu)
        .push("drop7", Layer::Dropout)
        .push_param("fc8", "classifier.6", Layer::Linear(Linear::zeros(num_classes, 4096)));
    net
}

pub fn alexnet(num_classes: usize) -> Network {
    let mut net = Network::new();
    net.push_param("conv1", "features.0", Layer::Conv(Conv2d::zeros(64, 3, 11, 4, 2)))
        .push("relu1", Layer::Relu)
        .push("pool1", pool(3, 2, 0))
        .push_param("conv2", "features.3", Layer::Conv(Conv2d::zeros(192, 64, 5, 1, 2)))
        .push("relu2", Layer::Relu)
        .push("pool2", pool(3, 2, 0))
        .push_param("conv3", "features.6", Layer::Conv(Conv2d::zeros(384, 192, 3, 1, 1)))
        .push("relu3", Layer::Relu)
        .push_param("conv4", "features.8", Layer::Conv(Conv2d::zeros(256, 384, 3, 1, 1)))
        .push("relu4", Layer::Relu)
        .push_param("conv5", "features.10", Layer::Conv(Conv2d::zeros(256, 256, 3, 1, 1)))
        .push("relu5", Layer::Relu)
        .push("pool5", pool(3, 2, 0))
        .push("avgpool", Layer::AdaptiveAvgPool(AdaptiveAvgPool2d { out_h: 6, out_w: 6 }))
        .push("flatten", Layer::Flatten)
        .push("drop6", Layer::Dropout)
        .push_param("fc6", "classifier.1", Layer::Linear(Linear::zeros(4096, 256 * 6 * 6)))
        .push("relu6", Layer::Relu)
        .push("drop7", Layer::Dropout)
        .push_param("fc7", "classifier.4", Layer::Linear(Linear::zeros(4096, 4096)))
        .push("relu7", Layer::Relu)
        .push_param("fc8", "classifier.6", Layer::Linear(Linear::zeros(num_classes, 4096)));
    net
}

fn basic_block(prefix: &str, in_ch: usize, out_ch: usize, stride: usize) -> Layer {
    let mut main = Network::new();
    main.push_param(
        format!("{prefix}.conv1"),
        format!("{prefix}.conv1"),
        Layer::Conv(Conv2d::zeros(out_ch, in_ch, 3, stride, 1).without_bias()),
    )
    .push_param(format!("{prefix}.bn1"), format!("{prefix}.bn1"), Layer::BatchNorm(BatchNorm2d::identity(out_ch)))
    .push(format!("{prefix}.relu"), Layer::Relu)
    .push_param(
        format!("{prefix}.conv2"),
        format!("{prefix}.conv2"),
        Layer::Conv(Conv2d::zeros(out_ch, out_ch, 3, 1, 1).without_bias()),
    )
    .push_param(format!("{prefix}.bn2"), format!("{prefix}.bn2"), Layer::BatchNorm(BatchNorm2d::identity(out_ch)));

    let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
        let mut sc = Network::new();
        sc.push_param(
            format!("{prefix}.downsample.0"),
            format!("{prefix}.downsample.0"),
            Layer::Conv(Conv2d::zeros(out_ch, in_ch, 1, stride, 0).without_bias()),
        )
        .push_param(
            format!("{prefix}.downsample.1"),
            format!("{prefix}.downsample.1"),
            Layer::BatchNorm(BatchNorm2d::identity(out_ch)),
        );
        sc
    });
    Layer::Residual(Box::new(BasicBlock { main, shortcut }))
}

pub fn resnet18(num_classes: usize) -> Network {
    let mut net = Network::new();
    net.push_param("conv1", "conv1", Layer::Conv(Conv2d::zeros(64, 3, 7, 2, 3).without_bias()))
        .push_param("bn1", "bn1", Layer::BatchNorm(BatchNorm2d::identity(64)))
        .push("relu", Layer::Relu)
        .push("maxpool", pool(3, 2, 1));
    let mut in_ch = 64;
    for (stage, &ch) in [64usize, 128, 256, 512].iter().enumerate() {
        for blk in 0..2 {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{}", stage + 1, blk);
            net.push(&prefix, basic_block(&prefix, in_ch, ch, stride));
            in_ch = ch;
        }
    }
    net.push("avgpool", Layer::AdaptiveAvgPool(AdaptiveAvgPool2d { out_h: 1, out_w: 1 }))
        .push("flatten", Layer::Flatten)
        .push_param("fc", "fc", Layer::Linear(Linear::zeros(num_classes, 512)));
    net
}

/// Two-convolution test network on 8x8 single-channel inputs: four channels
/// at `relu2` (4x4), `pool2` (4x2x2) feeding a linear head.
pub fn toy(num_classes: usize) -> Network {
    let mut net = Network::new();
    net.push_param("conv1", "conv1", Layer::Conv(Conv2d::zeros(4, 1, 3, 1, 1)))
        .push("relu1", Layer::Relu)
        .push("pool1", pool(2, 2, 0))
        .push_param("conv2", "conv2", Layer::Conv(Conv2d::zeros(4, 4, 3, 1, 1)))
        .push("relu2", Layer::Relu)
        .push("pool2", pool(2, 2, 0))
        .push("flatten", Layer::Flatten)
        .push_param("fc", "fc", Layer::Linear(Linear::zeros(num_classes, 16)));
    net
}
