fn main() {
    println!("ktrecon");
}
