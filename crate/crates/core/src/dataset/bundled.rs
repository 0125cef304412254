//! Metadata-only manifests for the ten benchmark datasets.
//!
//! Rosters carry class counts and base/novel sizes. Where the public class
//! names are short and well known they are included; otherwise classes get
//! positional placeholders. The concrete base/novel membership is a seeded
//! draw of the published size, since the original selection is random and
//! unpublished. Items must be attached by the user.

use rand::seq::SliceRandom;

use super::{ClassEntry, ClassSplit, DatasetManifest, ItemSource};
use crate::rng::keyed_rng;

/// `(name, base classes, novel classes)`.
pub const BUNDLED_SPLITS: [(&str, usize, usize); 10] = [
    ("imagenet-sketch", 712, 288),
    ("dtd", 37, 10),
    ("cifar-100", 80, 20),
    ("vgg-flowers", 82, 20),
    ("ucf-101", 81, 20),
    ("eurosat", 6, 4),
    ("quickdraw", 276, 69),
    ("fungi", 1115, 279),
    ("plant-disease", 30, 8),
    ("aircraft", 80, 20),
];

const EUROSAT: [&str; 10] = [
    "annual crop", "forest", "herbaceous vegetation", "highway", "industrial buildings",
    "pasture", "permanent crop", "residential buildings", "river", "sea or lake",
];

const DTD: [&str; 47] = [
    "banded", "blotchy", "braided", "bubbly", "bumpy", "chequered", "cobwebbed", "cracked",
    "crosshatched", "crystalline", "dotted", "fibrous", "flecked", "freckled", "frilly", "gauzy",
    "grid", "grooved", "honeycombed", "interlaced", "knitted", "lacelike", "lined", "marbled",
    "matted", "meshed", "paisley", "perforated", "pitted", "pleated", "polka-dotted", "porous",
    "potholed", "scaly", "smeared", "spiralled", "sprinkled", "stained", "stratified", "striped",
    "studded", "swirly", "veined", "waffled", "woven", "wrinkled", "zigzagged",
];

const CIFAR100: [&str; 100] = [
    "apple", "aquarium fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle", "bottle",
    "bowl", "boy", "bridge", "bus", "butterfly", "camel", "can", "castle", "caterpillar", "cattle",
    "chair", "chimpanzee", "clock", "cloud", "cockroach", "couch", "crab", "crocodile", "cup",
    "dinosaur", "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster", "house",
    "kangaroo", "keyboard", "lamp", "lawn mower", "leopard", "lion", "lizard", "lobster", "man",
    "maple tree", "motorcycle", "mountain", "mouse", "mushroom", "oak tree", "orange", "orchid",
    "otter", "palm tree", "pear", "pickup truck", "pine tree", "plain", "plate", "poppy",
    "porcupine", "possum", "rabbit", "raccoon", "ray", "road", "rocket", "rose", "sea", "seal",
    "shark", "shrew", "skunk", "skyscraper", "snail", "snake", "spider", "squirrel", "streetcar",
    "sunflower", "sweet pepper", "table", "tank", "telephone", "television", "tiger", "tractor",
    "train", "trout", "tulip", "turtle", "wardrobe", "whale", "willow tree", "wolf", "woman", "worm",
];

const PLANT_DISEASE: [&str; 38] = [
    "apple scab", "apple black rot", "apple cedar rust", "apple healthy", "blueberry healthy",
    "cherry powdery mildew", "cherry healthy", "corn gray leaf spot", "corn common rust",
    "corn northern leaf blight", "corn healthy", "grape black rot", "grape black measles",
    "grape leaf blight", "grape healthy", "orange citrus greening", "peach bacterial spot",
    "peach healthy", "bell pepper bacterial spot", "bell pepper healthy", "potato early blight",
    "potato late blight", "potato healthy", "raspberry healthy", "soybean healthy",
    "squash powdery mildew", "strawberry leaf scorch", "strawberry healthy",
    "tomato bacterial spot", "tomato early blight", "tomato late blight", "tomato leaf mold",
    "tomato septoria leaf spot", "tomato spider mites", "tomato target spot",
    "tomato yellow leaf curl virus", "tomato mosaic virus", "tomato healthy",
];

fn known_names(name: &str) -> Option<&'static [&'static str]> {
    match name {
        "eurosat" => Some(&EUROSAT),
        "dtd" => Some(&DTD),
        "cifar-100" => Some(&CIFAR100),
        "plant-disease" => Some(&PLANT_DISEASE),
        _ => None,
    }
}

/// Bundled manifest by name, with its published split sizes.
pub fn bundled_manifest(name: &str) -> Option<DatasetManifest> {
    let &(name, n_base, n_novel) = BUNDLED_SPLITS.iter().find(|(n, _, _)| *n == name)?;
    let n = n_base + n_novel;
    let names = known_names(name);
    let classes: Vec<ClassEntry> = (0..n)
        .map(|i| ClassEntry {
            id: format!("{name}/{i:04}"),
            display_name: names.map_or_else(|| format!("{name} class {i}"), |ns| ns[i].to_string()),
            items: vec![],
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(0, 0, &format!("bundled-split/{name}")));
    let mut is_base = vec![false; n];
    for &i in &order[..n_base] {
        is_base[i] = true;
    }
    let (mut base, mut novel) = (Vec::new(), Vec::new());
    for (c, b) in classes.iter().zip(is_base) {
        if b { base.push(c.id.clone()) } else { novel.push(c.id.clone()) }
    }
    Some(DatasetManifest {
        name: name.to_string(),
        notes: format!("metadata-only roster: {n_base} base / {n_novel} novel classes"),
        item_source: ItemSource::MetadataOnly,
        split: Some(ClassSplit { base, novel }),
        classes,
        items: vec![],
        hierarchy: vec![],
    })
}

pub fn bundled_manifests() -> Vec<DatasetManifest> {
    BUNDLED_SPLITS.iter().filter_map(|(n, _, _)| bundled_manifest(n)).collect()
}
