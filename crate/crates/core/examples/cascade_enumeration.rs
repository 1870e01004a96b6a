//! Every path through the four-classifier cascade.
//!
//! Constant classifiers pin each stage's decision; the cascade then visits
//! only the stages on one root-to-leaf path.
//!
//! ```text
//! cargo run --release --example cascade_enumeration
//! ```

use cardiocascade::backend::{BinaryClassifier, ClassifyContext, ConstantClassifier};
use cardiocascade::cascade::{cascade_classify, ClassifierInput, Thresholds};

fn main() {
    let input = ClassifierInput::zeros(3, 16, 16);
    let ctx = ClassifyContext {
        case_id: "demo",
        truth: None,
    };
    let yes = ConstantClassifier::new(0.9);
    let no = ConstantClassifier::new(0.1);

    println!("c1 c2 c3 c4  visited     class");
    for bits in 0..16u8 {
        let pick = |i: u8| -> &dyn BinaryClassifier {
            if bits >> i & 1 == 1 {
                &yes
            } else {
                &no
            }
        };
        let r = cascade_classify(&input, [pick(0), pick(1), pick(2), pick(3)], Thresholds::default(), &ctx)
            .expect("constant scores are valid");
        let flags: Vec<char> = (0..4).map(|i| if bits >> i & 1 == 1 { '+' } else { '-' }).collect();
        let visited: Vec<String> = r.classifiers_invoked().iter().map(|c| format!("c{c}")).collect();
        println!(
            " {}  {}  {}  {}  {:<10}  {}",
            flags[0],
            flags[1],
            flags[2],
            flags[3],
            visited.join(","),
            r.predicted.name()
        );
    }
}
