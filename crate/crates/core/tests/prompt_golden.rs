use std::path::PathBuf;

use cocotree::image::ImageRef;
use cocotree::prompts;

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/prompts").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn decompose_prompts_match_golden() {
    let cases = ["bird eats snake", "a man rides a horse on the beach", "the red cup is to the left of the blue plate"];
    for (i, caption) in cases.iter().enumerate() {
        let p = prompts::decompose_prompt(caption, 2);
        assert_eq!(p.text, golden(&format!("decompose_{}.txt", i + 1)), "case {}", i + 1);
        assert!(p.image.is_none());
    }
}

#[test]
fn expand_prompts_match_golden() {
    let cases = [
        ("bird eats", "bird eats snake", 3),
        ("snake gets eaten", "bird eats snake", 3),
        ("a man", "a man rides a horse on the beach", 5),
    ];
    for (i, (node, caption, s)) in cases.iter().enumerate() {
        let p = prompts::expand_prompt(node, caption, *s);
        assert_eq!(p.text, golden(&format!("expand_{}.txt", i + 1)), "case {}", i + 1);
    }
}

#[test]
fn visual_prompts_match_golden() {
    let cases = [
        ("images/bird.png", "bird eats snake"),
        ("https://example.com/horse.jpg", "a saddle on a horse"),
        ("img/cup.png", "a red cup"),
    ];
    for (i, (image, statement)) in cases.iter().enumerate() {
        let image = ImageRef::new(image).unwrap();
        let p = prompts::visual_prompt(&image, statement);
        assert_eq!(p.text, golden(&format!("visual_{}.txt", i + 1)), "case {}", i + 1);
        assert_eq!(p.image.as_ref().map(|i| i.reference()), Some(image.reference()));
    }
}

#[test]
fn entail_prompts_match_golden() {
    let cases = [
        ("bird eats snake", "snake in bird's mouth"),
        ("a man rides a horse on the beach", "a saddle on a horse"),
        ("the red cup is to the left of the blue plate", "a wooden table"),
    ];
    for (i, (premise, hypothesis)) in cases.iter().enumerate() {
        let p = prompts::entail_prompt(premise, hypothesis);
        assert_eq!(p.text, golden(&format!("entail_{}.txt", i + 1)), "case {}", i + 1);
    }
}
