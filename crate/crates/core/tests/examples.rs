//! Runs every example under `cargo test`.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!("../examples/", stringify!($name), ".rs"));

            #[test]
            fn runs() {
                main().unwrap();
            }
        }
    };
}

example!(corpus);
example!(tokenizer);
example!(losses);
example!(world_model);
example!(video_decoder);
example!(metrics);
example!(end_to_end);
